//! Medical report disambiguation rewriting.
//!
//! The pipeline pretrains a small encoder-decoder with an infilling plus
//! supervised contrastive objective, masks the tokens an ambiguity classifier
//! attends to most, and regenerates them while nudging decoder hidden states
//! toward the sentence's diagnostic decision.

pub mod baselines;
pub mod corpus;
pub mod detect;
pub mod eval;
pub mod fingerprint;
pub mod nnkit;
pub mod pipeline;
pub mod pretrain;
pub mod pseudolabel;
pub mod rewrite;

pub use corpus::{Corpus, CorpusError, ReportSentence, Schema, Source, SplitSpec};
