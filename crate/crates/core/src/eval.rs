//! Automatic rewrite metrics, Cohen's kappa and result tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{rule_pathology, Corpus, ReportSentence};
use crate::nnkit::checkpoint::{Checkpoint, CheckpointInfo, ModelKind};
use crate::nnkit::train::{train_mlm, TrainConfig};
use crate::nnkit::{argmax, EncoderClassifier, MaskedLm, NnError, Seq2Seq, Tokenizer, TransformerConfig};
use crate::pseudolabel::{cluster_label, ClusterModel};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{originals} originals but {rewrites} rewrites")]
    MisalignedPairs { originals: usize, rewrites: usize },
    #[error("sentence `{id}` lacks a gold `{label}` label")]
    MissingGold { id: String, label: &'static str },
    #[error("no pairs to evaluate")]
    Empty,
    #[error("metrics were computed on different pair counts: {0:?}")]
    InconsistentN(Vec<usize>),
    #[error("chance agreement is 1 but observed agreement is {0}")]
    DegenerateMarginals(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Binary sentence classifier; `true` is the positive class.
pub trait SentenceClassifier {
    fn positive(&self, text: &str) -> Result<bool, EvalError>;
}

impl SentenceClassifier for Checkpoint<EncoderClassifier> {
    fn positive(&self, text: &str) -> Result<bool, EvalError> {
        Ok(argmax(&self.model.predict(&self.tokenizer.encode(text))?.probs) == 1)
    }
}

/// Maps a sentence to a fine-grained pathology label.
pub trait PathologyLabeler {
    fn label(&self, text: &str) -> Result<String, EvalError>;
}

/// Keyword rules of the synthetic report grammar.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleLabeler;

impl PathologyLabeler for RuleLabeler {
    fn label(&self, text: &str) -> Result<String, EvalError> {
        Ok(rule_pathology(text))
    }
}

/// Cluster assignment under a fitted pseudo-label model.
pub struct ClusterLabeler<'a> {
    pub clusters: &'a ClusterModel,
    pub generator: &'a Seq2Seq,
    pub tokenizer: &'a Tokenizer,
}

impl PathologyLabeler for ClusterLabeler<'_> {
    fn label(&self, text: &str) -> Result<String, EvalError> {
        Ok(cluster_label(self.clusters.label_of(self.generator, self.tokenizer, text)?))
    }
}

fn check_pairs(originals: usize, rewrites: usize) -> Result<(), EvalError> {
    if originals != rewrites {
        return Err(EvalError::MisalignedPairs { originals, rewrites });
    }
    if originals == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Accuracies on originals and on rewrites against the originals' gold labels.
fn paired_accuracy(
    originals: &[ReportSentence],
    rewrites: &[String],
    clf: &dyn SentenceClassifier,
    label: &'static str,
    gold: impl Fn(&ReportSentence) -> Option<bool>,
) -> Result<(f64, f64), EvalError> {
    check_pairs(originals.len(), rewrites.len())?;
    let (mut on_orig, mut on_rew) = (0usize, 0usize);
    for (s, r) in originals.iter().zip(rewrites) {
        let y = gold(s).ok_or_else(|| EvalError::MissingGold { id: s.id.clone(), label })?;
        on_orig += usize::from(clf.positive(&s.text)? == y);
        on_rew += usize::from(clf.positive(r)? == y);
    }
    let n = originals.len() as f64;
    Ok((on_orig as f64 / n, on_rew as f64 / n))
}

/// Ambiguity-classifier accuracy on originals minus accuracy on rewrites.
pub fn ambiguity_delta(originals: &[ReportSentence], rewrites: &[String], clf: &dyn SentenceClassifier) -> Result<f64, EvalError> {
    let (a, b) = paired_accuracy(originals, rewrites, clf, "ambiguous", |s| s.ambiguous)?;
    Ok(a - b)
}

/// Absolute gap in abnormality-classifier accuracy between originals and rewrites.
pub fn decision_delta(originals: &[ReportSentence], rewrites: &[String], clf: &dyn SentenceClassifier) -> Result<f64, EvalError> {
    let (a, b) = paired_accuracy(originals, rewrites, clf, "abnormal", |s| s.abnormal)?;
    Ok((a - b).abs())
}

/// Fraction of pairs whose original and rewrite get the same pathology label.
pub fn pathology_match(originals: &[String], rewrites: &[String], labeler: &dyn PathologyLabeler) -> Result<f64, EvalError> {
    check_pairs(originals.len(), rewrites.len())?;
    let mut same = 0usize;
    for (o, r) in originals.iter().zip(rewrites) {
        same += usize::from(labeler.label(o)? == labeler.label(r)?);
    }
    Ok(same as f64 / originals.len() as f64)
}

/// Pseudo-log-likelihood of a sentence: mean log-probability of each token
/// with that position masked.
pub fn pll(text: &str, mlm: &MaskedLm, tokenizer: &Tokenizer) -> Result<f64, EvalError> {
    Ok(mlm.pll(&tokenizer.encode(text))?)
}

pub fn mean_pll(texts: &[String], mlm: &MaskedLm, tokenizer: &Tokenizer) -> Result<f64, EvalError> {
    if texts.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = 0.0;
    for t in texts {
        total += pll(t, mlm, tokenizer)?;
    }
    Ok(total / texts.len() as f64)
}

/// Masked LM used as the PLL scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmConfig {
    pub train: TrainConfig,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub max_len: usize,
    pub mask_ratio: f64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig { train: TrainConfig::default(), d_model: 64, n_heads: 4, d_ff: 128, layers: 2, max_len: 50, mask_ratio: 0.15 }
    }
}

pub fn train_pll_scorer(corpus: &Corpus, tokenizer: &Tokenizer, config: &MlmConfig) -> Result<Checkpoint<MaskedLm>, EvalError> {
    let model_config = TransformerConfig {
        vocab_size: tokenizer.len(),
        d_model: config.d_model,
        n_heads: config.n_heads,
        d_ff: config.d_ff,
        enc_layers: config.layers,
        dec_layers: 0,
        max_len: config.max_len,
    };
    let sentences: Vec<Vec<usize>> = corpus.sentences().iter().map(|s| tokenizer.encode(&s.text)).collect();
    for ids in &sentences {
        model_config.check_len(ids.len())?;
    }
    let mut model = MaskedLm::new(model_config.clone(), config.train.seed);
    let report = train_mlm(&mut model, &sentences, config.mask_ratio, &config.train)?;
    let mut info = CheckpointInfo::new(ModelKind::MaskedLm, "mlm", model_config, tokenizer);
    info.seed = config.train.seed;
    info.corpus_fingerprint = corpus.fingerprint();
    info.config = serde_json::to_value(config).expect("config serializes");
    info.metrics.insert("steps".into(), report.steps as f64);
    if let Some(loss) = report.epoch_losses.last() {
        info.metrics.insert("final_loss".into(), *loss);
    }
    Ok(Checkpoint { model, tokenizer: tokenizer.clone(), info })
}

/// Two annotators' binary labels on the same items.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgreementTable {
    pub pairs: Vec<(bool, bool)>,
}

impl AgreementTable {
    /// Counts: (both yes, first only, second only, both no).
    pub fn from_counts(yes_yes: usize, yes_no: usize, no_yes: usize, no_no: usize) -> Self {
        let mut pairs = Vec::new();
        pairs.extend(std::iter::repeat_n((true, true), yes_yes));
        pairs.extend(std::iter::repeat_n((true, false), yes_no));
        pairs.extend(std::iter::repeat_n((false, true), no_yes));
        pairs.extend(std::iter::repeat_n((false, false), no_no));
        AgreementTable { pairs }
    }

    /// Indices where the annotators disagree.
    pub fn disagreements(&self) -> Vec<usize> {
        self.pairs.iter().enumerate().filter(|(_, (a, b))| a != b).map(|(i, _)| i).collect()
    }
}

/// `(p_o - p_e) / (1 - p_e)` with chance agreement from the marginal products.
pub fn cohen_kappa(table: &AgreementTable) -> Result<f64, EvalError> {
    let n = table.pairs.len();
    if n == 0 {
        return Err(EvalError::Empty);
    }
    let n = n as f64;
    let agree = table.pairs.iter().filter(|(a, b)| a == b).count() as f64;
    let first = table.pairs.iter().filter(|(a, _)| *a).count() as f64 / n;
    let second = table.pairs.iter().filter(|(_, b)| *b).count() as f64 / n;
    let p_o = agree / n;
    let p_e = first * second + (1.0 - first) * (1.0 - second);
    if p_e == 1.0 {
        return if p_o == 1.0 { Ok(1.0) } else { Err(EvalError::DegenerateMarginals(p_o)) };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Minimum kappa for closing an annotation round.
pub const KAPPA_THRESHOLD: f64 = 0.8;

pub fn round_closable(kappa: f64) -> bool {
    kappa >= KAPPA_THRESHOLD
}

/// One metric value and the number of pairs it was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricInputs {
    pub delta_acc_am: Measured,
    pub delta_acc_dis: Measured,
    pub pathology_match: Measured,
    pub pll: Measured,
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub n: usize,
    pub delta_acc_am: f64,
    pub delta_acc_dis: f64,
    pub pathology_match: f64,
    pub pll: f64,
    pub config_fingerprint: String,
}

pub fn build_report(system: &str, config_fingerprint: &str, inputs: &MetricInputs) -> Result<EvalReport, EvalError> {
    let ns = vec![inputs.delta_acc_am.n, inputs.delta_acc_dis.n, inputs.pathology_match.n, inputs.pll.n];
    if ns.iter().any(|&n| n != ns[0]) {
        return Err(EvalError::InconsistentN(ns));
    }
    if ns[0] == 0 {
        return Err(EvalError::Empty);
    }
    Ok(EvalReport {
        system: system.to_owned(),
        n: ns[0],
        delta_acc_am: inputs.delta_acc_am.value,
        delta_acc_dis: inputs.delta_acc_dis.value,
        pathology_match: inputs.pathology_match.value,
        pll: inputs.pll.value,
        config_fingerprint: config_fingerprint.to_owned(),
    })
}

/// Published numbers kept for comparison only; they need corpora and model
/// sizes this toolkit does not have.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub system: &'static str,
    pub dataset: &'static str,
    pub delta_acc_am: f64,
    pub delta_acc_dis: f64,
    pub pathology_match: f64,
    pub pll: f64,
    pub reproducible: bool,
}

pub const REFERENCE_OURS_OPENI: ReferenceRow = ReferenceRow {
    system: "Ours",
    dataset: "OpenI",
    delta_acc_am: 0.496,
    delta_acc_dis: 0.032,
    pathology_match: 0.809,
    pll: -6.232,
    reproducible: false,
};

/// Models used to score a rewrite system.
pub struct EvalModels<'a> {
    pub ambiguity: &'a dyn SentenceClassifier,
    pub abnormality: &'a dyn SentenceClassifier,
    pub labeler: &'a dyn PathologyLabeler,
    pub mlm: &'a MaskedLm,
    pub tokenizer: &'a Tokenizer,
}

/// All four metrics on one aligned set of pairs; PLL is the rewrites' mean.
pub fn evaluate_system(
    system: &str,
    config_fingerprint: &str,
    originals: &[ReportSentence],
    rewrites: &[String],
    models: &EvalModels<'_>,
) -> Result<EvalReport, EvalError> {
    check_pairs(originals.len(), rewrites.len())?;
    let n = originals.len();
    let texts: Vec<String> = originals.iter().map(|s| s.text.clone()).collect();
    let inputs = MetricInputs {
        delta_acc_am: Measured { value: ambiguity_delta(originals, rewrites, models.ambiguity)?, n },
        delta_acc_dis: Measured { value: decision_delta(originals, rewrites, models.abnormality)?, n },
        pathology_match: Measured { value: pathology_match(&texts, rewrites, models.labeler)?, n },
        pll: Measured { value: mean_pll(rewrites, models.mlm, models.tokenizer)?, n },
    };
    build_report(system, config_fingerprint, &inputs)
}

/// Plain-text table with columns ΔAcc_Am, ΔAcc_Dis, Pathology Match, PLL.
pub fn render_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.system.chars().count()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>9}  {:>9}  {:>15}  {:>8}", "System", "ΔAcc_Am", "ΔAcc_Dis", "Pathology Match", "PLL");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.3}  {:>9.3}  {:>15.3}  {:>8.3}",
            r.system, r.delta_acc_am, r.delta_acc_dis, r.pathology_match, r.pll
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::TransformerConfig;
    use proptest::prelude::*;
    use std::collections::HashMap;

    /// Looks answers up by text.
    struct Stub(HashMap<String, bool>);

    impl SentenceClassifier for Stub {
        fn positive(&self, text: &str) -> Result<bool, EvalError> {
            Ok(self.0[text])
        }
    }

    fn sentence(i: usize, ambiguous: bool, abnormal: bool) -> ReportSentence {
        ReportSentence::labeled(format!("s{i}"), format!("orig {i}"), ambiguous, abnormal, None)
    }

    fn rewrites(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("rew {i}")).collect()
    }

    fn stub(orig: &[bool], rew: &[bool]) -> Stub {
        let mut m = HashMap::new();
        for (i, v) in orig.iter().enumerate() {
            m.insert(format!("orig {i}"), *v);
        }
        for (i, v) in rew.iter().enumerate() {
            m.insert(format!("rew {i}"), *v);
        }
        Stub(m)
    }

    #[test]
    fn ambiguity_delta_arithmetic() {
        let originals: Vec<_> = (0..4).map(|i| sentence(i, true, true)).collect();
        let clf = stub(&[true, true, true, false], &[false, false, true, false]);
        assert!((ambiguity_delta(&originals, &rewrites(4), &clf).unwrap() - 0.5).abs() < 1e-12);
        let all = stub(&[true; 4], &[false; 4]);
        assert_eq!(ambiguity_delta(&originals, &rewrites(4), &all).unwrap(), 1.0);
        let texts: Vec<String> = originals.iter().map(|s| s.text.clone()).collect();
        assert_eq!(ambiguity_delta(&originals, &texts, &clf).unwrap(), 0.0);
        assert!(matches!(ambiguity_delta(&originals, &rewrites(3), &clf), Err(EvalError::MisalignedPairs { .. })));
    }

    #[test]
    fn decision_delta_arithmetic() {
        let originals: Vec<_> = (0..4).map(|i| sentence(i, true, i % 2 == 0)).collect();
        let gold = [true, false, true, false];
        let clf = stub(&gold, &[true, false, false, false]);
        assert!((decision_delta(&originals, &rewrites(4), &clf).unwrap() - 0.25).abs() < 1e-12);
        let perfect = stub(&gold, &gold);
        assert_eq!(decision_delta(&originals, &rewrites(4), &perfect).unwrap(), 0.0);
    }

    #[test]
    fn pathology_match_counts() {
        let originals: Vec<String> = (0..10).map(|_| "mild cardiomegaly.".to_owned()).collect();
        let mut rew = originals.clone();
        rew[3] = "small left effusion.".into();
        rew[7] = "the heart is normal.".into();
        assert!((pathology_match(&originals, &rew, &RuleLabeler).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(pathology_match(&originals, &originals, &RuleLabeler).unwrap(), 1.0);
        let other = vec!["no acute process.".to_owned(); 10];
        assert_eq!(pathology_match(&originals, &other, &RuleLabeler).unwrap(), 0.0);
    }

    #[test]
    fn uniform_mlm_pll() {
        let tok = Tokenizer::from_texts(["the heart is normal.", "mild edema."], 1).unwrap();
        let mut mlm = MaskedLm::new(TransformerConfig::tiny(tok.len()), 0);
        mlm.zero_output();
        let v = pll("the heart is normal.", &mlm, &tok).unwrap();
        assert!((v + (tok.len() as f64).ln()).abs() < 1e-6);
        assert_eq!(v, pll("the heart is normal.", &mlm, &tok).unwrap());
    }

    #[test]
    fn kappa_tables() {
        let k = cohen_kappa(&AgreementTable::from_counts(4, 1, 1, 4)).unwrap();
        assert!((k - 0.6).abs() < 1e-12);
        assert_eq!(cohen_kappa(&AgreementTable::from_counts(3, 0, 0, 7)).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&AgreementTable::from_counts(5, 0, 0, 0)).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&AgreementTable::from_counts(0, 5, 0, 0)).unwrap(), 0.0);
        assert!(matches!(cohen_kappa(&AgreementTable::default()), Err(EvalError::Empty)));
        assert_eq!(AgreementTable::from_counts(4, 1, 1, 4).disagreements(), vec![4, 5]);
        assert!(round_closable(0.8) && !round_closable(0.8 - 1e-12));
    }

    #[test]
    fn random_labels_have_near_zero_kappa() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pairs = (0..10_000).map(|_| (rng.random_bool(0.5), rng.random_bool(0.5))).collect();
        assert!(cohen_kappa(&AgreementTable { pairs }).unwrap().abs() <= 0.05);
    }

    #[test]
    fn report_rows() {
        let m = |value| Measured { value, n: 4 };
        let inputs = MetricInputs { delta_acc_am: m(0.0), delta_acc_dis: m(0.0), pathology_match: m(1.0), pll: m(-2.5) };
        let r = build_report("identity", "abc", &inputs).unwrap();
        assert_eq!((r.n, r.pathology_match), (4, 1.0));
        let bad = MetricInputs { pll: Measured { value: -2.5, n: 3 }, ..inputs };
        assert!(matches!(build_report("x", "abc", &bad), Err(EvalError::InconsistentN(_))));
        let table = render_table(&[r]);
        let header = table.lines().next().unwrap();
        let cols = ["ΔAcc_Am", "ΔAcc_Dis", "Pathology Match", "PLL"];
        let pos: Vec<usize> = cols.iter().map(|c| header.find(c).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        const { assert!(!REFERENCE_OURS_OPENI.reproducible) };
        assert_eq!(REFERENCE_OURS_OPENI.pll, -6.232);
    }

    fn table() -> impl Strategy<Value = AgreementTable> {
        prop::collection::vec((any::<bool>(), any::<bool>()), 1..60).prop_map(|pairs| AgreementTable { pairs })
    }

    proptest! {
        #[test]
        fn kappa_is_symmetric_and_label_invariant(t in table()) {
            let swapped = AgreementTable { pairs: t.pairs.iter().map(|(a, b)| (*b, *a)).collect() };
            let flipped = AgreementTable { pairs: t.pairs.iter().map(|(a, b)| (!a, !b)).collect() };
            match cohen_kappa(&t) {
                Ok(k) => {
                    prop_assert!((k - cohen_kappa(&swapped).unwrap()).abs() < 1e-12);
                    prop_assert!((k - cohen_kappa(&flipped).unwrap()).abs() < 1e-12);
                    prop_assert!(k <= 1.0 + 1e-12);
                }
                Err(_) => prop_assert!(cohen_kappa(&swapped).is_err()),
            }
        }

        #[test]
        fn deltas_are_bounded(orig in prop::collection::vec(any::<bool>(), 1..20), seed in any::<u64>()) {
            let n = orig.len();
            let rew: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let originals: Vec<_> = (0..n).map(|i| sentence(i, i % 3 != 0, i % 2 == 0)).collect();
            let clf = stub(&orig, &rew);
            let am = ambiguity_delta(&originals, &rewrites(n), &clf).unwrap();
            let dis = decision_delta(&originals, &rewrites(n), &clf).unwrap();
            prop_assert!((-1.0..=1.0).contains(&am));
            prop_assert!((0.0..=1.0).contains(&dis));
        }
    }
}
