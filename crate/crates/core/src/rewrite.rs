//! Perturb stage: regenerate masked positions with the generator while
//! gradient steps on the final decoder state push a decision classifier
//! toward the target label.
//!
//! At each regenerated position the offset `δ` added to the last decoder
//! state is updated `iterations` times by
//! `δ ← δ - step_size · g / (‖g‖^gamma + 1e-10)`, where `g` is the gradient of
//! `CE(f(x̃), y) + kl_coef · KL(p_δ ‖ p_0)`. The classifier reads the output
//! prefix as one-hot rows, the current position as `p_δ`, and the copied
//! tokens after it as one-hot rows. The emitted token is the greedy choice
//! under `p ∝ p_δ^w · p_0^(1-w)` with `w = gm_scale · gm_decay^t`.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::ReportSentence;
use crate::detect::{mask_topk, saliency, DetectError, KPolicy};
use crate::nnkit::checkpoint::Checkpoint;
use crate::nnkit::seq2seq::teacher_input_with_prefix;
use crate::nnkit::tokenizer::{join_tokens, split_words, SPECIALS};
use crate::nnkit::{EncoderClassifier, Graph, HeadAggregation, NnError, Seq2Seq, Tokenizer};

const GRAD_EPS: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum RewriteError {
    #[error("invalid rewrite config: {0}")]
    InvalidConfig(String),
    #[error("sentence `{0}` is not relevant")]
    NotRelevant(String),
    #[error("empty sentence")]
    EmptyInput,
    #[error("sentence has {len} tokens, more than max_length {max}")]
    TooLong { len: usize, max: usize },
    #[error("mode/model mismatch: {0}")]
    ModeConfigMismatch(String),
    #[error("non-finite gradient at decoding position {0}")]
    NonFiniteGradient(usize),
    #[error("{what} tokenizer fingerprint {found} differs from the generator's {expected}")]
    FingerprintMismatch { what: &'static str, expected: String, found: String },
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteMode {
    #[default]
    Full,
    /// Every content position is regenerated from the unmasked input.
    NoDetect,
    /// Detect and perturb with a generator pretrained without the contrastive term.
    NoContrastive,
    NoDetectNoContrastive,
}

impl RewriteMode {
    pub const ALL: [RewriteMode; 4] =
        [RewriteMode::Full, RewriteMode::NoDetect, RewriteMode::NoContrastive, RewriteMode::NoDetectNoContrastive];

    pub fn name(self) -> &'static str {
        match self {
            RewriteMode::Full => "full",
            RewriteMode::NoDetect => "no_detect",
            RewriteMode::NoContrastive => "no_contrastive",
            RewriteMode::NoDetectNoContrastive => "no_detect_no_contrastive",
        }
    }

    pub fn uses_detect(self) -> bool {
        matches!(self, RewriteMode::Full | RewriteMode::NoContrastive)
    }

    /// Whether the generator must have been pretrained with a contrastive weight.
    pub fn contrastive_generator(self) -> bool {
        matches!(self, RewriteMode::Full | RewriteMode::NoDetect)
    }
}

impl std::str::FromStr for RewriteMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        RewriteMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown rewrite mode `{s}`"))
    }
}

/// The diagnostic decision the rewrite is pushed toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Normal,
    Abnormal,
}

impl Decision {
    pub fn from_abnormal(abnormal: bool) -> Self {
        if abnormal {
            Decision::Abnormal
        } else {
            Decision::Normal
        }
    }

    /// Class index in the decision classifier.
    pub fn class(self) -> usize {
        usize::from(self == Decision::Abnormal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewriteConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub kl_coef: f64,
    /// Exponent on the gradient norm in the update denominator.
    pub gamma: f64,
    /// Fusion weight of the perturbed distribution at position 0.
    pub gm_scale: f64,
    /// Per-position decay of the fusion weight.
    pub gm_decay: f64,
    pub max_length: usize,
    /// Stop iterating at a position once p(y) reaches this value.
    pub early_stop_confidence: Option<f64>,
    pub mode: RewriteMode,
    pub k_policy: KPolicy,
    pub aggregation: HeadAggregation,
}

impl Default for RewriteConfig {
    fn default() -> Self {
        RewriteConfig {
            iterations: 15,
            step_size: 0.5,
            kl_coef: 0.01,
            gamma: 0.5,
            gm_scale: 0.95,
            gm_decay: 0.98,
            max_length: 50,
            early_stop_confidence: None,
            mode: RewriteMode::Full,
            k_policy: KPolicy::default(),
            aggregation: HeadAggregation::Mean,
        }
    }
}

impl RewriteConfig {
    pub fn validate(&self) -> Result<(), RewriteError> {
        let bad = |m: &str| Err(RewriteError::InvalidConfig(m.to_owned()));
        if !(self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        if !(self.kl_coef >= 0.0) {
            return bad("kl_coef must be nonnegative");
        }
        if !(self.gm_scale > 0.0 && self.gm_scale <= 1.0) {
            return bad("gm_scale must lie in (0, 1]");
        }
        if !(self.gm_decay > 0.0 && self.gm_decay <= 1.0) {
            return bad("gm_decay must lie in (0, 1]");
        }
        if !self.gamma.is_finite() || self.max_length == 0 {
            return bad("gamma must be finite and max_length positive");
        }
        Ok(())
    }
}

/// One regenerated position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub position: usize,
    pub iterations: usize,
    /// p(y) with the unperturbed distribution at this position.
    pub p_y_before: f64,
    /// p(y) with the fused distribution at this position.
    pub p_y_after: f64,
    /// KL(perturbed ‖ unperturbed) after the last iteration.
    pub kl: f64,
    pub fusion_weight: f64,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteTrace {
    pub input: String,
    pub decision: Decision,
    pub mode: RewriteMode,
    pub tokens: Vec<String>,
    /// Positions selected by the detect stage (empty without detect).
    pub masked_positions: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub output_tokens: Vec<String>,
    pub output: String,
    /// Decision-classifier probability of `decision` for the output.
    pub final_p_y: f64,
}

impl RewriteTrace {
    pub fn regenerated_positions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.position).collect()
    }
}

/// The three checkpoints a rewrite needs, sharing one tokenizer.
#[derive(Debug, Clone)]
pub struct RewriteModels {
    pub generator: Checkpoint<Seq2Seq>,
    pub detector: Option<Checkpoint<EncoderClassifier>>,
    pub decision: Checkpoint<EncoderClassifier>,
}

impl RewriteModels {
    pub fn new(
        generator: Checkpoint<Seq2Seq>,
        detector: Option<Checkpoint<EncoderClassifier>>,
        decision: Checkpoint<EncoderClassifier>,
    ) -> Result<Self, RewriteError> {
        let expected = generator.tokenizer.fingerprint();
        let check = |what, tok: &Tokenizer| {
            let found = tok.fingerprint();
            if found == expected {
                Ok(())
            } else {
                Err(RewriteError::FingerprintMismatch { what, expected: expected.clone(), found })
            }
        };
        if let Some(d) = &detector {
            check("detector", &d.tokenizer)?;
        }
        check("decision", &decision.tokenizer)?;
        Ok(RewriteModels { generator, detector, decision })
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.generator.tokenizer
    }

    fn check_mode(&self, mode: RewriteMode) -> Result<(), RewriteError> {
        if mode.uses_detect() && self.detector.is_none() {
            return Err(RewriteError::ModeConfigMismatch(format!("mode {} needs a detect checkpoint", mode.name())));
        }
        let lambda2 = self
            .generator
            .info
            .loss_weights
            .ok_or_else(|| RewriteError::ModeConfigMismatch("generator metadata lacks loss weights".into()))?
            .lambda2;
        match (mode.contrastive_generator(), lambda2 > 0.0) {
            (true, false) => Err(RewriteError::ModeConfigMismatch(format!(
                "mode {} needs a contrastively pretrained generator, got lambda2 = 0",
                mode.name()
            ))),
            (false, true) => Err(RewriteError::ModeConfigMismatch(format!(
                "mode {} needs a generator pretrained with lambda2 = 0, got {lambda2}",
                mode.name()
            ))),
            _ => Ok(()),
        }
    }
}

/// Classifier output when each row of `dist` is a distribution over the vocabulary.
pub fn soft_classify(clf: &EncoderClassifier, dist: &Array2<f64>) -> Result<Vec<f64>, NnError> {
    clf.predict_soft(dist)
}

/// `-log p(y)` under [`soft_classify`] and its gradient with respect to `dist`.
pub fn soft_cross_entropy(clf: &EncoderClassifier, dist: &Array2<f64>, y: usize) -> Result<(f64, Array2<f64>), NnError> {
    let mut g = Graph::inference();
    let d = g.input(dist.clone());
    let x = clf.soft_embed(&mut g, d);
    let (logits, _) = clf.forward_embedded(&mut g, x)?;
    let lp = g.log_softmax(logits);
    let picked = g.pick(lp, &[y]);
    let ce = g.scale(picked, -1.0);
    let mut grads = g.backward(ce);
    Ok((g.scalar(ce), grads.take(d).unwrap_or_else(|| Array2::zeros(dist.dim()))))
}

/// `h - step_size · g / (‖g‖₂^gamma + 1e-10)`.
pub fn perturb_step(h: &Array2<f64>, grad: &Array2<f64>, step_size: f64, gamma: f64) -> Option<Array2<f64>> {
    if h.dim() != grad.dim() || grad.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || step_size == 0.0 {
        return Some(h.clone());
    }
    Some(h - &(grad * (step_size / (norm.powf(gamma) + GRAD_EPS))))
}

/// Loss of one regenerated position as a function of the offset on its decoder state.
pub struct PerturbationObjective<'m> {
    generator: &'m Seq2Seq,
    classifier: &'m EncoderClassifier,
    hidden: Array2<f64>,
    before: Array2<f64>,
    after: Array2<f64>,
    target: usize,
    log_p0: Array2<f64>,
    kl_coef: f64,
}

#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub ce: f64,
    pub kl: f64,
    pub loss: f64,
    /// Next-token distribution under the offset.
    pub probs: Array1<f64>,
    /// Gradient of `loss` with respect to the offset (1×d).
    pub grad: Array2<f64>,
}

fn one_hot_rows(ids: &[usize], vocab: usize) -> Array2<f64> {
    let mut m = Array2::zeros((ids.len(), vocab));
    for (r, &id) in ids.iter().enumerate() {
        m[[r, id]] = 1.0;
    }
    m
}

impl<'m> PerturbationObjective<'m> {
    /// `hidden` is the final decoder state (1×d) for the position between
    /// the already emitted `before` ids and the copied `after` ids.
    pub fn new(
        generator: &'m Seq2Seq,
        classifier: &'m EncoderClassifier,
        hidden: Array2<f64>,
        before: &[usize],
        after: &[usize],
        target: usize,
        kl_coef: f64,
    ) -> Self {
        let v = generator.config.vocab_size;
        let mut g = Graph::inference();
        let h = g.constant(hidden.clone());
        let logits = generator.project(&mut g, h);
        let lp = g.log_softmax(logits);
        let log_p0 = g.value(lp).clone();
        PerturbationObjective {
            generator,
            classifier,
            hidden,
            before: one_hot_rows(before, v),
            after: one_hot_rows(after, v),
            target,
            log_p0,
            kl_coef,
        }
    }

    pub fn unperturbed(&self) -> Array1<f64> {
        self.log_p0.row(0).mapv(f64::exp)
    }

    /// Full soft sequence with `probs` at the current position.
    pub fn sequence(&self, probs: &Array1<f64>) -> Array2<f64> {
        let mid = probs.view().insert_axis(Axis(0));
        ndarray::concatenate(Axis(0), &[self.before.view(), mid, self.after.view()]).expect("same vocabulary width")
    }

    pub fn evaluate(&self, delta: &Array2<f64>) -> Result<ObjectiveValue, NnError> {
        let mut g = Graph::inference();
        let d = g.input(delta.clone());
        let h = g.constant(self.hidden.clone());
        let shifted = g.add(h, d);
        let logits = self.generator.project(&mut g, shifted);
        let lp = g.log_softmax(logits);
        let p = g.exp(lp);
        let mut parts = Vec::with_capacity(3);
        if self.before.nrows() > 0 {
            parts.push(g.constant(self.before.clone()));
        }
        parts.push(p);
        if self.after.nrows() > 0 {
            parts.push(g.constant(self.after.clone()));
        }
        let dist = g.concat_rows(&parts);
        let x = self.classifier.soft_embed(&mut g, dist);
        let (cl_logits, _) = self.classifier.forward_embedded(&mut g, x)?;
        let cl_lp = g.log_softmax(cl_logits);
        let picked = g.pick(cl_lp, &[self.target]);
        let ce = g.scale(picked, -1.0);
        let lp0 = g.constant(self.log_p0.clone());
        let diff = g.sub(lp, lp0);
        let terms = g.mul(p, diff);
        let kl = g.sum(terms);
        let weighted = g.scale(kl, self.kl_coef);
        let loss = g.add(ce, weighted);
        let mut grads = g.backward(loss);
        Ok(ObjectiveValue {
            ce: g.scalar(ce),
            kl: g.scalar(kl),
            loss: g.scalar(loss),
            probs: g.value(p).row(0).to_owned(),
            grad: grads.take(d).unwrap_or_else(|| Array2::zeros(delta.dim())),
        })
    }

    /// Classifier probability of the target with `probs` at the current position.
    pub fn p_target(&self, probs: &Array1<f64>) -> Result<f64, NnError> {
        Ok(soft_classify(self.classifier, &self.sequence(probs))?[self.target])
    }
}

/// Normalized `p^w · q^(1-w)`.
pub fn geometric_fusion(p: &Array1<f64>, q: &Array1<f64>, w: f64) -> Array1<f64> {
    let log = p.mapv(f64::ln) * w + q.mapv(f64::ln) * (1.0 - w);
    let max = log.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = log.mapv(|v| (v - max).exp());
    let z = e.sum();
    e / z
}

fn greedy_non_special(p: &Array1<f64>) -> usize {
    let mut best = SPECIALS.len();
    for i in SPECIALS.len()..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

fn decoder_state(generator: &Seq2Seq, src: &[usize], prefix: &[usize]) -> Result<Array2<f64>, NnError> {
    let dec_in = teacher_input_with_prefix(prefix);
    let mut g = Graph::inference();
    let memory = generator.encode(&mut g, src)?;
    let h = generator.decode_hidden(&mut g, memory, &dec_in)?;
    let last = dec_in.len() - 1;
    Ok(g.value(h).row(last).to_owned().insert_axis(Axis(0)))
}

/// Left-to-right decoding that copies every position outside `targets` and
/// regenerates the positions in `targets` from encoder input `src`.
pub fn regenerate(
    models: &RewriteModels,
    tokens: &[String],
    ids: &[usize],
    src: &[usize],
    targets: &[usize],
    y: Decision,
    config: &RewriteConfig,
) -> Result<(Vec<String>, Vec<usize>, Vec<StepRecord>), RewriteError> {
    let generator = &models.generator.model;
    let classifier = &models.decision.model;
    let tokenizer = models.tokenizer();
    let mut out_ids = ids.to_vec();
    let mut out_tokens = tokens.to_vec();
    let mut steps = Vec::with_capacity(targets.len());
    for t in 0..ids.len() {
        if !targets.contains(&t) {
            continue;
        }
        let hidden = decoder_state(generator, src, &out_ids[..t])?;
        let objective = PerturbationObjective::new(
            generator,
            classifier,
            hidden,
            &out_ids[..t],
            &out_ids[t + 1..],
            y.class(),
            config.kl_coef,
        );
        let p0 = objective.unperturbed();
        let p_y_before = objective.p_target(&p0)?;
        let mut delta = Array2::zeros((1, generator.config.d_model));
        let mut done = 0;
        let mut kl = 0.0;
        for _ in 0..config.iterations {
            let value = objective.evaluate(&delta)?;
            if config.early_stop_confidence.is_some_and(|c| (-value.ce).exp() >= c) {
                break;
            }
            delta = perturb_step(&delta, &value.grad, config.step_size, config.gamma)
                .ok_or(RewriteError::NonFiniteGradient(t))?;
            done += 1;
        }
        let w = config.gm_scale * config.gm_decay.powi(t as i32);
        let fused = if done == 0 {
            p0.clone()
        } else {
            let last = objective.evaluate(&delta)?;
            kl = last.kl;
            geometric_fusion(&last.probs, &p0, w)
        };
        let choice = greedy_non_special(&fused);
        out_ids[t] = choice;
        out_tokens[t] = tokenizer.token(choice).to_owned();
        steps.push(StepRecord {
            position: t,
            iterations: done,
            p_y_before,
            p_y_after: objective.p_target(&fused)?,
            kl,
            fusion_weight: if done == 0 { 0.0 } else { w },
            token: out_tokens[t].clone(),
        });
    }
    Ok((out_tokens, out_ids, steps))
}

/// Rewrites `text` toward decision `y`.
pub fn rewrite_text(text: &str, y: Decision, models: &RewriteModels, config: &RewriteConfig) -> Result<RewriteTrace, RewriteError> {
    config.validate()?;
    models.check_mode(config.mode)?;
    let tokenizer = models.tokenizer();
    let tokens = split_words(text);
    if tokens.is_empty() {
        return Err(RewriteError::EmptyInput);
    }
    let max = config.max_length.min(models.generator.model.config.max_len);
    if tokens.len() > max {
        return Err(RewriteError::TooLong { len: tokens.len(), max });
    }
    let ids = tokenizer.encode(text);
    let (masked_positions, src, targets) = if config.mode.uses_detect() {
        let detector = &models.detector.as_ref().expect("checked by check_mode").model;
        let scored = saliency(detector, tokenizer, text, config.aggregation)?;
        let masked = mask_topk(&scored, config.k_policy)?;
        (masked.masked_positions.clone(), masked.masked_ids(), masked.masked_positions)
    } else {
        let targets: Vec<usize> = (0..ids.len()).filter(|&t| tokenizer.is_content(ids[t])).collect();
        (Vec::new(), ids.clone(), targets)
    };
    let (output_tokens, out_ids, steps) = regenerate(models, &tokens, &ids, &src, &targets, y, config)?;
    let final_p_y = models.decision.model.predict(&out_ids)?.probs[y.class()];
    Ok(RewriteTrace {
        input: text.to_owned(),
        decision: y,
        mode: config.mode,
        tokens,
        masked_positions,
        steps,
        output: join_tokens(output_tokens.iter().map(String::as_str)),
        output_tokens,
        final_p_y,
    })
}

/// Rewrites a relevant sentence toward decision `y`.
pub fn rewrite(
    sentence: &ReportSentence,
    y: Decision,
    models: &RewriteModels,
    config: &RewriteConfig,
) -> Result<RewriteTrace, RewriteError> {
    if !sentence.relevant {
        return Err(RewriteError::NotRelevant(sentence.id.clone()));
    }
    rewrite_text(&sentence.text, y, models, config)
}
