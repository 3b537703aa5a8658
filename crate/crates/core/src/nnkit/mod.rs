//! Minimal differentiable neural stack: tape autodiff, transformer layers,
//! tokenizer, encoder-decoder generator, encoder classifier, masked LM,
//! optimizer and checkpoint directories.

pub mod checkpoint;
pub mod classifier;
pub mod layers;
pub mod mlm;
pub mod optim;
pub mod params;
pub mod seq2seq;
pub mod tape;
pub mod tokenizer;
pub mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{CheckpointInfo, ModelKind};
pub use classifier::{EncoderClassifier, HeadAggregation, Prediction};
pub use mlm::MaskedLm;
pub use optim::Adam;
pub use params::{Graph, ParamId, ParamStore};
pub use seq2seq::{NextToken, Seq2Seq};
pub use tape::{Grads, Tape, Var};
pub use tokenizer::Tokenizer;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("sequence length {len} exceeds the maximum {max}")]
    LengthExceeded { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Shape of a transformer model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    /// Ignored by encoder-only models.
    pub dec_layers: usize,
    pub max_len: usize,
}

impl TransformerConfig {
    /// d=128, two encoder and two decoder layers, four heads, length 50.
    pub fn desk(vocab_size: usize) -> Self {
        TransformerConfig { vocab_size, d_model: 128, n_heads: 4, d_ff: 256, enc_layers: 2, dec_layers: 2, max_len: 50 }
    }

    /// A few thousand parameters; used for finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        TransformerConfig { vocab_size, d_model: 8, n_heads: 2, d_ff: 16, enc_layers: 1, dec_layers: 1, max_len: 12 }
    }

    pub fn with_dims(mut self, d_model: usize, n_heads: usize, d_ff: usize) -> Self {
        self.d_model = d_model;
        self.n_heads = n_heads;
        self.d_ff = d_ff;
        self
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<(), NnError> {
        if len == 0 {
            return Err(NnError::EmptyInput);
        }
        if len > self.max_len {
            return Err(NnError::LengthExceeded { len, max: self.max_len });
        }
        Ok(())
    }
}

/// Index of the largest entry, first on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
