//! Detect stage: binary sentence classifiers, CLS-attention saliency and
//! top-K masking of the most salient content tokens.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ReportSentence};
use crate::nnkit::checkpoint::{Checkpoint, CheckpointInfo, ModelKind};
use crate::nnkit::tokenizer::{split_words, MASK, SPECIALS};
use crate::nnkit::train::{train_classifier, TrainConfig};
use crate::nnkit::{EncoderClassifier, HeadAggregation, NnError, Tokenizer, TransformerConfig};

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("sentence `{id}` has no `{target}` label")]
    MissingLabels { id: String, target: &'static str },
    #[error("sentence has no maskable content tokens")]
    EmptyContent,
    #[error("invalid mask policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which binary label a classifier predicts. Class 1 is the positive label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelTarget {
    Ambiguity,
    Abnormality,
}

impl LabelTarget {
    pub fn name(self) -> &'static str {
        match self {
            LabelTarget::Ambiguity => "ambiguity",
            LabelTarget::Abnormality => "abnormality",
        }
    }

    pub fn label(self, s: &ReportSentence) -> Option<bool> {
        match self {
            LabelTarget::Ambiguity => s.ambiguous,
            LabelTarget::Abnormality => s.abnormal,
        }
    }
}

/// Architecture and optimization settings for an encoder classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub train: TrainConfig,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub max_len: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { train: TrainConfig::default(), d_model: 64, n_heads: 4, d_ff: 128, layers: 2, max_len: 50 }
    }
}

impl ClassifierConfig {
    pub fn model_config(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            enc_layers: self.layers,
            dec_layers: 0,
            max_len: self.max_len,
        }
    }
}

fn labeled_examples(
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    target: LabelTarget,
) -> Result<Vec<(Vec<usize>, usize)>, DetectError> {
    corpus
        .sentences()
        .iter()
        .map(|s| {
            let y = target
                .label(s)
                .ok_or_else(|| DetectError::MissingLabels { id: s.id.clone(), target: target.name() })?;
            Ok((tokenizer.encode(&s.text), usize::from(y)))
        })
        .collect()
}

/// Trains a binary classifier for `target`, keeping the best-validation weights.
///
/// `role` is stamped into the checkpoint metadata (`ambiguity`, `decision`, ...).
pub fn train_label_classifier(
    train: &Corpus,
    val: &Corpus,
    tokenizer: &Tokenizer,
    target: LabelTarget,
    role: &str,
    config: &ClassifierConfig,
) -> Result<Checkpoint<EncoderClassifier>, DetectError> {
    let train_data = labeled_examples(train, tokenizer, target)?;
    let val_data = labeled_examples(val, tokenizer, target)?;
    let model_config = config.model_config(tokenizer.len());
    for (ids, _) in train_data.iter().chain(&val_data) {
        model_config.check_len(ids.len())?;
    }
    let mut model = EncoderClassifier::new(model_config.clone(), 2, config.train.seed);
    let report = train_classifier(&mut model, &train_data, &val_data, &config.train)?;
    tracing::info!(role, ?report.val_accuracy, report.train_accuracy, "classifier trained");
    let mut info = CheckpointInfo::new(ModelKind::Classifier, role, model_config, tokenizer);
    info.n_classes = Some(2);
    info.seed = config.train.seed;
    info.corpus_fingerprint = train.fingerprint();
    let mut snapshot = serde_json::to_value(config).expect("config serializes");
    snapshot["target"] = serde_json::Value::from(target.name());
    info.config = snapshot;
    info.metrics.insert("train_accuracy".into(), report.train_accuracy);
    if let Some(acc) = report.val_accuracy {
        info.metrics.insert("val_accuracy".into(), acc);
    }
    info.metrics.insert("steps".into(), report.steps as f64);
    Ok(Checkpoint { model, tokenizer: tokenizer.clone(), info })
}

/// The detect-stage classifier: predicts whether a sentence is ambiguous.
pub fn train_ambiguity_classifier(
    train: &Corpus,
    val: &Corpus,
    tokenizer: &Tokenizer,
    config: &ClassifierConfig,
) -> Result<Checkpoint<EncoderClassifier>, DetectError> {
    train_label_classifier(train, val, tokenizer, LabelTarget::Ambiguity, "ambiguity", config)
}

/// The perturbation-stage classifier: predicts abnormality from unambiguous
/// sentences only, so ambiguous phrasing does not shape its boundary.
pub fn train_decision_classifier(
    train: &Corpus,
    val: &Corpus,
    tokenizer: &Tokenizer,
    config: &ClassifierConfig,
) -> Result<Checkpoint<EncoderClassifier>, DetectError> {
    let clear = |s: &ReportSentence| s.relevant && s.ambiguous == Some(false);
    train_label_classifier(&train.filter(clear), &val.filter(clear), tokenizer, LabelTarget::Abnormality, "decision", config)
}

/// How many content tokens to mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "policy", content = "value")]
pub enum KPolicy {
    /// `max(1, round(ratio · content_length))`.
    Ratio(f64),
    Fixed(usize),
}

impl Default for KPolicy {
    fn default() -> Self {
        KPolicy::Ratio(0.15)
    }
}

impl KPolicy {
    pub fn k(&self, content_len: usize) -> Result<usize, DetectError> {
        if content_len == 0 {
            return Err(DetectError::EmptyContent);
        }
        match *self {
            KPolicy::Ratio(r) if (0.0..=1.0).contains(&r) => {
                Ok(((r * content_len as f64).round() as usize).clamp(1, content_len))
            }
            KPolicy::Ratio(r) => Err(DetectError::InvalidPolicy(format!("ratio {r} outside [0, 1]"))),
            KPolicy::Fixed(k) if (1..=content_len).contains(&k) => Ok(k),
            KPolicy::Fixed(k) => {
                Err(DetectError::InvalidPolicy(format!("fixed K={k} outside 1..={content_len}")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyResult {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    /// Zero on non-content tokens; content scores sum to 1.
    pub scores: Vec<f64>,
    /// Whether each position may be masked.
    pub maskable: Vec<bool>,
    /// Ascending.
    pub masked_positions: Vec<usize>,
    pub masked_text: Vec<String>,
}

impl SaliencyResult {
    pub fn content_len(&self) -> usize {
        self.maskable.iter().filter(|m| **m).count()
    }

    /// Token ids with MASK at the masked positions.
    pub fn masked_ids(&self) -> Vec<usize> {
        let mut ids = self.ids.clone();
        for &p in &self.masked_positions {
            ids[p] = MASK;
        }
        ids
    }
}

/// Per-token CLS attention in the classifier's last layer, aggregated over heads
/// and renormalized over the maskable positions.
pub fn saliency(
    clf: &EncoderClassifier,
    tokenizer: &Tokenizer,
    text: &str,
    agg: HeadAggregation,
) -> Result<SaliencyResult, DetectError> {
    let tokens = split_words(text);
    let ids = tokenizer.encode(text);
    let maskable: Vec<bool> = tokens
        .iter()
        .zip(&ids)
        .map(|(tok, &id)| !SPECIALS.contains(&tok.as_str()) && (id < SPECIALS.len() || tokenizer.is_content(id)))
        .collect();
    if !maskable.iter().any(|m| *m) {
        return Err(DetectError::EmptyContent);
    }
    let raw = clf.predict_with(&ids, agg)?.saliency;
    let mut scores: Vec<f64> = raw.iter().zip(&maskable).map(|(s, m)| if *m { *s } else { 0.0 }).collect();
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter_mut().for_each(|s| *s /= total);
    }
    Ok(SaliencyResult { masked_text: tokens.clone(), tokens, ids, scores, maskable, masked_positions: Vec::new() })
}

/// The `k` highest-scoring eligible positions, ties to the lowest index, ascending.
pub fn top_k_positions(scores: &[f64], eligible: &[bool], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| eligible[i]).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Masks the top-K content tokens of a saliency result.
pub fn mask_topk(result: &SaliencyResult, policy: KPolicy) -> Result<SaliencyResult, DetectError> {
    let k = policy.k(result.content_len())?;
    let masked_positions = top_k_positions(&result.scores, &result.maskable, k);
    let mut masked_text = result.tokens.clone();
    for &p in &masked_positions {
        masked_text[p] = SPECIALS[MASK].to_owned();
    }
    Ok(SaliencyResult { masked_positions, masked_text, ..result.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, split, SplitSpec, SyntheticSpec, JARGON_TERMS};
    use proptest::prelude::*;

    fn scored(scores: Vec<f64>) -> SaliencyResult {
        let n = scores.len();
        SaliencyResult {
            tokens: (0..n).map(|i| format!("w{i}")).collect(),
            ids: (0..n).map(|i| i + SPECIALS.len()).collect(),
            maskable: vec![true; n],
            masked_positions: Vec::new(),
            masked_text: Vec::new(),
            scores,
        }
    }

    #[test]
    fn fixed_k_masks_the_argmax() {
        let r = mask_topk(&scored(vec![0.1, 0.5, 0.2, 0.2]), KPolicy::Fixed(1)).unwrap();
        assert_eq!(r.masked_positions, vec![1]);
        assert_eq!(r.masked_text[1], "[MASK]");
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let r = mask_topk(&scored(vec![0.3, 0.3]), KPolicy::Fixed(1)).unwrap();
        assert_eq!(r.masked_positions, vec![0]);
    }

    #[test]
    fn ratio_policy_on_twenty_tokens() {
        let scores: Vec<f64> = (0..20).map(|i| ((i * 7919) % 23) as f64 / 23.0).collect();
        let r = mask_topk(&scored(scores.clone()), KPolicy::default()).unwrap();
        assert_eq!(r.masked_positions.len(), 3);
        // Independent oracle: full descending sort by (score, -index).
        let mut idx: Vec<usize> = (0..20).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut expect = idx[..3].to_vec();
        expect.sort();
        assert_eq!(r.masked_positions, expect);
    }

    #[test]
    fn policy_bounds() {
        assert_eq!(KPolicy::Ratio(0.15).k(2).unwrap(), 1);
        assert_eq!(KPolicy::Ratio(0.15).k(10).unwrap(), 2);
        assert!(matches!(KPolicy::Fixed(3).k(2), Err(DetectError::InvalidPolicy(_))));
        assert!(matches!(KPolicy::Fixed(1).k(0), Err(DetectError::EmptyContent)));
    }

    #[test]
    fn boundaries_are_never_masked() {
        let tok = Tokenizer::from_texts(["the heart is normal."], 1).unwrap();
        let clf = EncoderClassifier::new(TransformerConfig::tiny(tok.len()), 2, 0);
        let s = saliency(&clf, &tok, "the heart is normal.", HeadAggregation::Mean).unwrap();
        assert_eq!(s.maskable, vec![true, true, true, true, false]);
        assert_eq!(s.scores[4], 0.0);
        assert!((s.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let all = mask_topk(&s, KPolicy::Fixed(4)).unwrap();
        assert_eq!(all.masked_positions, vec![0, 1, 2, 3]);
        assert!(matches!(saliency(&clf, &tok, ".", HeadAggregation::Mean), Err(DetectError::EmptyContent)));
    }

    #[test]
    fn single_content_token_takes_all_mass() {
        let tok = Tokenizer::from_texts(["cardiomegaly."], 1).unwrap();
        let clf = EncoderClassifier::new(TransformerConfig::tiny(tok.len()), 2, 3);
        let s = saliency(&clf, &tok, "cardiomegaly.", HeadAggregation::Mean).unwrap();
        assert_eq!(s.scores, vec![1.0, 0.0]);
        assert_eq!(s, saliency(&clf, &tok, "cardiomegaly.", HeadAggregation::Mean).unwrap());
    }

    #[test]
    fn constant_labels_give_base_rate() {
        let c = generate_synthetic(&SyntheticSpec::new(40, 2)).unwrap();
        let ambiguous = c.filter(|s| s.ambiguous == Some(true));
        let tok = Tokenizer::build(&c, 1).unwrap();
        let cfg = ClassifierConfig {
            train: TrainConfig { lr: 3e-3, batch_size: 8, epochs: 2, ..TrainConfig::default() },
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            layers: 1,
            max_len: 20,
        };
        let ckpt = train_ambiguity_classifier(&ambiguous, &ambiguous, &tok, &cfg).unwrap();
        assert_eq!(ckpt.info.metrics["val_accuracy"], 1.0);
        assert_eq!(ckpt.info.role, "ambiguity");
        assert_eq!(ckpt.info.config["train"]["batch_size"], 8);
    }

    #[test]
    fn default_hyperparameters_round_trip() {
        let cfg = ClassifierConfig::default();
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.batch_size, 64);
        let back: ClassifierConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_labels_are_reported() {
        let c = Corpus::new(
            vec![ReportSentence {
                id: "x".into(),
                text: "lateral view.".into(),
                relevant: false,
                ambiguous: None,
                abnormal: None,
                pathology: None,
                source: Default::default(),
            }],
            "t",
        )
        .unwrap();
        let tok = Tokenizer::build(&c, 1).unwrap();
        let err = train_ambiguity_classifier(&c, &c, &tok, &ClassifierConfig::default()).unwrap_err();
        assert!(matches!(err, DetectError::MissingLabels { .. }));
    }

    #[test]
    fn jargon_rule_is_learned_and_salient() {
        let spec = SyntheticSpec::new(600, 11).with_mix([1.0, 0.0, 0.0]);
        let c = generate_synthetic(&spec).unwrap();
        let (train, val, test) = split(&c, &SplitSpec::standard(11)).unwrap();
        let tok = Tokenizer::build(&c, 1).unwrap();
        let cfg = ClassifierConfig {
            train: TrainConfig { lr: 2e-3, batch_size: 32, epochs: 6, seed: 1, ..TrainConfig::default() },
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            layers: 1,
            max_len: 20,
        };
        let ckpt = train_ambiguity_classifier(&train, &val, &tok, &cfg).unwrap();
        assert!(ckpt.info.metrics["val_accuracy"] >= 0.95, "{:?}", ckpt.info.metrics);
        let (mut hits, mut total) = (0, 0);
        for s in test.sentences().iter().filter(|s| s.ambiguous == Some(true)) {
            let r = saliency(&ckpt.model, &tok, &s.text, HeadAggregation::Mean).unwrap();
            let top = top_k_positions(&r.scores, &r.maskable, 1)[0];
            total += 1;
            hits += usize::from(JARGON_TERMS.contains(&r.tokens[top].as_str()));
        }
        assert!(hits as f64 >= 0.8 * total as f64, "{hits}/{total}");
    }

    proptest! {
        #[test]
        fn masked_sets_grow_with_k(scores in prop::collection::vec(0u8..5, 1..30)) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let r = scored(scores);
            let n = r.scores.len();
            let mut prev: Vec<usize> = Vec::new();
            for k in 1..=n {
                let cur = mask_topk(&r, KPolicy::Fixed(k)).unwrap().masked_positions;
                prop_assert_eq!(cur.len(), k);
                prop_assert!(prev.iter().all(|p| cur.contains(p)));
                prev = cur;
            }
        }
    }
}
