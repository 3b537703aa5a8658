//! The synthetic benchmark: every artifact the rewrite systems need, trained
//! at desk scale from one generated corpus, and evaluation of a system over
//! the ambiguous test sentences.

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic, split, Corpus, CorpusError, ReportSentence, SplitSpec, SyntheticSpec};
use crate::detect::{
    train_ambiguity_classifier, train_decision_classifier, train_label_classifier, ClassifierConfig, DetectError,
    LabelTarget,
};
use crate::eval::{evaluate_system, train_pll_scorer, EvalError, EvalModels, EvalReport, MlmConfig, RuleLabeler};
use crate::fingerprint::json_fingerprint;
use crate::nnkit::checkpoint::Checkpoint;
use crate::nnkit::train::TrainConfig;
use crate::nnkit::{EncoderClassifier, MaskedLm, NnError, Seq2Seq, Tokenizer};
use crate::pretrain::{pretrain_run, PretrainConfig, PretrainError};
use crate::rewrite::{rewrite, Decision, RewriteConfig, RewriteError, RewriteModels, RewriteMode, RewriteTrace};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub split_seed: u64,
    /// Settings for the contrastive generator; the ablation generator uses the
    /// same settings with `lambda2 = 0`.
    pub pretrain: PretrainConfig,
    pub detector: ClassifierConfig,
    pub decision: ClassifierConfig,
    pub eval_ambiguity: ClassifierConfig,
    pub eval_abnormality: ClassifierConfig,
    pub mlm: MlmConfig,
    pub rewrite: RewriteConfig,
}

/// Small classifier used for every detect, decision and evaluation model.
pub fn desk_classifier(seed: u64) -> ClassifierConfig {
    ClassifierConfig {
        train: TrainConfig { lr: 1e-3, batch_size: 64, epochs: 8, seed, ..TrainConfig::default() },
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        layers: 1,
        max_len: 24,
    }
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            corpus_size: 2000,
            corpus_seed: 7,
            split_seed: 7,
            pretrain: PretrainConfig {
                lr: 1e-3,
                epochs: 12,
                seed: 3,
                max_len: 24,
                d_model: 64,
                n_heads: 4,
                d_ff: 128,
                ..PretrainConfig::default()
            },
            detector: desk_classifier(1),
            decision: desk_classifier(2),
            eval_ambiguity: desk_classifier(3),
            eval_abnormality: desk_classifier(4),
            mlm: MlmConfig {
                train: TrainConfig { lr: 1e-3, batch_size: 32, epochs: 5, seed: 5, ..TrainConfig::default() },
                d_model: 32,
                n_heads: 4,
                d_ff: 64,
                layers: 2,
                max_len: 24,
                mask_ratio: 0.15,
            },
            rewrite: RewriteConfig { max_length: 24, ..RewriteConfig::default() },
        }
    }
}

impl BenchmarkConfig {
    pub fn ablation_pretrain(&self) -> PretrainConfig {
        PretrainConfig { lambda2: 0.0, ..self.pretrain.clone() }
    }
}

/// Every trained artifact of the synthetic benchmark.
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub corpus: Corpus,
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
    pub tokenizer: Tokenizer,
    /// Pretrained with the contrastive term.
    pub generator: Checkpoint<Seq2Seq>,
    /// Pretrained with infilling only.
    pub plain_generator: Checkpoint<Seq2Seq>,
    pub detector: Checkpoint<EncoderClassifier>,
    pub decision: Checkpoint<EncoderClassifier>,
    pub eval_ambiguity: Checkpoint<EncoderClassifier>,
    pub eval_abnormality: Checkpoint<EncoderClassifier>,
    pub mlm: Checkpoint<MaskedLm>,
}

/// Rewrites of one system with their scores.
pub struct SystemRun {
    pub traces: Vec<RewriteTrace>,
    pub report: EvalReport,
}

impl Benchmark {
    pub fn build(config: BenchmarkConfig) -> Result<Self, PipelineError> {
        let corpus = generate_synthetic(&SyntheticSpec::new(config.corpus_size, config.corpus_seed))?;
        let (train, val, test) = split(&corpus, &SplitSpec::standard(config.split_seed))?;
        let tokenizer = Tokenizer::build(&corpus, 1)?;
        let generator = pretrain_run(&train, &tokenizer, &config.pretrain)?.checkpoint;
        let plain_generator = pretrain_run(&train, &tokenizer, &config.ablation_pretrain())?.checkpoint;
        let detector = train_ambiguity_classifier(&train, &val, &tokenizer, &config.detector)?;
        let decision = train_decision_classifier(&train, &val, &tokenizer, &config.decision)?;
        let eval_ambiguity =
            train_label_classifier(&train, &val, &tokenizer, LabelTarget::Ambiguity, "eval-ambiguity", &config.eval_ambiguity)?;
        let eval_abnormality = train_label_classifier(
            &train,
            &val,
            &tokenizer,
            LabelTarget::Abnormality,
            "eval-abnormality",
            &config.eval_abnormality,
        )?;
        let mlm = train_pll_scorer(&train, &tokenizer, &config.mlm)?;
        Ok(Benchmark {
            config,
            corpus,
            train,
            val,
            test,
            tokenizer,
            generator,
            plain_generator,
            detector,
            decision,
            eval_ambiguity,
            eval_abnormality,
            mlm,
        })
    }

    /// Relevant, gold-ambiguous test sentences in corpus order.
    pub fn ambiguous_test(&self) -> Vec<ReportSentence> {
        self.test.sentences().iter().filter(|s| s.relevant && s.ambiguous == Some(true)).cloned().collect()
    }

    /// The checkpoints `mode` runs with: the matching generator, the detector
    /// when the mode masks, and the decision classifier.
    pub fn models(&self, mode: RewriteMode) -> Result<RewriteModels, RewriteError> {
        let generator = if mode.contrastive_generator() { &self.generator } else { &self.plain_generator };
        let detector = mode.uses_detect().then(|| self.detector.clone());
        RewriteModels::new(generator.clone(), detector, self.decision.clone())
    }

    pub fn eval_models(&self) -> EvalModels<'_> {
        EvalModels {
            ambiguity: &self.eval_ambiguity,
            abnormality: &self.eval_abnormality,
            labeler: &RuleLabeler,
            mlm: &self.mlm.model,
            tokenizer: &self.tokenizer,
        }
    }

    /// Rewrites every ambiguous test sentence toward its gold decision and scores the result.
    pub fn run_system(&self, system: &str, config: &RewriteConfig) -> Result<SystemRun, PipelineError> {
        let originals = self.ambiguous_test();
        let models = self.models(config.mode)?;
        let mut traces = Vec::with_capacity(originals.len());
        for s in &originals {
            let y = Decision::from_abnormal(s.abnormal.unwrap_or(false));
            traces.push(rewrite(s, y, &models, config)?);
        }
        let rewrites: Vec<String> = traces.iter().map(|t| t.output.clone()).collect();
        let fingerprint = json_fingerprint(&(&self.config, config));
        let report = evaluate_system(system, &fingerprint, &originals, &rewrites, &self.eval_models())?;
        Ok(SystemRun { traces, report })
    }
}
