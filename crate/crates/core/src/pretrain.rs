//! Contrastive + infilling pretraining of the generator.
//!
//! The training objective is `λ1·L_infill + λ2·L_contrastive`. Sentence
//! representations are decoder final states mean-pooled over positions and
//! L2-normalized; similarities are dot products divided by the temperature.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::nnkit::checkpoint::{Checkpoint, CheckpointInfo, LossWeights, ModelKind};
use crate::nnkit::optim::{Adam, AdamConfig};
use crate::nnkit::seq2seq::teacher_input;
use crate::nnkit::tokenizer::{MASK, SPECIALS};
use crate::nnkit::{Graph, NnError, Seq2Seq, Tokenizer, TransformerConfig, Var};

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error("invalid pretraining config: {0}")]
    InvalidConfig(String),
    #[error("sentence `{0}` has no pathology label")]
    MissingLabels(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which reading of the per-anchor contrastive term to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveForm {
    /// `-(1/|S(i)|) · log(Σ_{j∈S(i)} e^{s_ij} / Σ_{j≠i} e^{s_ij})`.
    #[default]
    LogOfSum,
    /// `-(1/|S(i)|) · Σ_{j∈S(i)} log(e^{s_ij} / Σ_{k≠i} e^{s_ik})`.
    SumOfLogs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub max_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub form: ContrastiveForm,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            tau: 0.07,
            lambda1: 1.0,
            lambda2: 1.0,
            lr: 5e-4,
            batch_size: 32,
            mask_ratio: 0.3,
            max_len: 50,
            epochs: 10,
            seed: 0,
            form: ContrastiveForm::LogOfSum,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            enc_layers: 2,
            dec_layers: 2,
            weight_decay: 0.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: &str| Err(PretrainError::InvalidConfig(m.to_owned()));
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda1 + self.lambda2 == 0.0 {
            return bad("lambda1 and lambda2 must be nonnegative and not both zero");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return bad("batch_size and max_len must be positive");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            max_len: self.max_len,
        }
    }
}

/// Mean-pooled decoder states for `ids` (teacher-forced on itself), not normalized.
pub fn pooled_hidden(model: &Seq2Seq, ids: &[usize]) -> Result<Array1<f64>, NnError> {
    let mut g = Graph::inference();
    let (_, h) = model.forward(&mut g, ids, &teacher_input(ids), None)?;
    let pooled = g.mean_rows(h);
    Ok(g.value(pooled).row(0).to_owned())
}

/// Unit-norm sentence embedding.
pub fn embed_sentence(model: &Seq2Seq, ids: &[usize]) -> Result<Array1<f64>, NnError> {
    let v = pooled_hidden(model, ids)?;
    let norm = v.dot(&v).sqrt();
    Ok(v / norm)
}

pub fn similarity(hi: &[f64], hj: &[f64], tau: f64) -> f64 {
    assert!(tau > 0.0, "tau must be positive");
    hi.iter().zip(hj).map(|(a, b)| a * b).sum::<f64>() / tau
}

/// Value and diagnostics of a contrastive batch loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveLoss {
    pub value: f64,
    pub anchors_without_positives: usize,
    /// No anchor had a positive; the value is 0.
    pub degenerate: bool,
}

/// Contrastive loss over the rows of `raw` (rows are L2-normalized first).
pub fn contrastive_loss<L: Eq>(raw: &Array2<f64>, labels: &[L], tau: f64, form: ContrastiveForm) -> ContrastiveLoss {
    let mut g = Graph::inference();
    let x = g.constant(raw.clone());
    let (loss, stats) = contrastive_loss_var(&mut g, x, labels, tau, form);
    let value = loss.map_or(0.0, |v| g.scalar(v));
    if stats.degenerate {
        tracing::warn!("contrastive batch has no anchor with a positive");
    }
    ContrastiveLoss { value, ..stats }
}

/// Builds the contrastive loss on the tape. Returns `None` for a degenerate batch.
pub fn contrastive_loss_var<L: Eq>(
    g: &mut Graph<'_>,
    raw: Var,
    labels: &[L],
    tau: f64,
    form: ContrastiveForm,
) -> (Option<Var>, ContrastiveLoss) {
    let n = labels.len();
    assert_eq!(g.value(raw).nrows(), n, "one label per embedding");
    assert!(n >= 2, "contrastive batches need at least two sentences");
    let anchors: Vec<usize> = (0..n).filter(|&i| (0..n).any(|j| j != i && labels[j] == labels[i])).collect();
    let stats = ContrastiveLoss {
        value: 0.0,
        anchors_without_positives: n - anchors.len(),
        degenerate: anchors.is_empty(),
    };
    if anchors.is_empty() {
        return (None, stats);
    }
    let z = g.l2_normalize(raw);
    let sims = g.matmul_bt(z, z);
    let sims = g.scale(sims, 1.0 / tau);
    let rows = g.gather_rows(sims, &anchors);
    let m = anchors.len();
    let positive = Array2::from_shape_fn((m, n), |(a, j)| {
        let i = anchors[a];
        if j != i && labels[j] == labels[i] { 1.0 } else { 0.0 }
    });
    let others = Array2::from_shape_fn((m, n), |(a, j)| if j != anchors[a] { 1.0 } else { 0.0 });
    let counts: Vec<f64> = positive.rows().into_iter().map(|r| r.sum()).collect();
    let lse_all = g.masked_log_sum_exp(rows, others);
    let per_anchor = match form {
        ContrastiveForm::LogOfSum => {
            let lse_pos = g.masked_log_sum_exp(rows, positive);
            g.sub(lse_pos, lse_all)
        }
        ContrastiveForm::SumOfLogs => {
            let pmask = g.constant(positive);
            let masked = g.mul(rows, pmask);
            let ones = g.constant(Array2::ones((n, 1)));
            let pos_sum = g.matmul(masked, ones);
            let cnt = g.constant(Array2::from_shape_fn((m, 1), |(a, _)| counts[a]));
            let scaled = g.mul(lse_all, cnt);
            g.sub(pos_sum, scaled)
        }
    };
    let weights = g.constant(Array2::from_shape_fn((m, 1), |(a, _)| -1.0 / counts[a]));
    let weighted = g.mul(per_anchor, weights);
    (Some(g.sum(weighted)), stats)
}

/// Replaces `max(1, round(ratio·n))` of the `n` non-special positions with MASK,
/// chosen uniformly without replacement from a generator seeded with `seed`.
pub fn mask_for_infilling(ids: &[usize], ratio: f64, seed: u64) -> Vec<usize> {
    let candidates: Vec<usize> = (0..ids.len()).filter(|&t| ids[t] >= SPECIALS.len()).collect();
    let mut out = ids.to_vec();
    if candidates.is_empty() {
        return out;
    }
    let k = ((ratio * candidates.len() as f64).round() as usize).clamp(1, candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, candidates.len(), k) {
        out[candidates[i]] = MASK;
    }
    out
}

/// Summed token negative log-likelihood of `original` given encoder input `masked`,
/// plus the decoder states and the token count.
pub fn infilling_nll<'p>(
    g: &mut Graph<'p>,
    model: &'p Seq2Seq,
    original: &[usize],
    masked: &[usize],
) -> Result<(Var, Var, usize), NnError> {
    let (logits, h) = model.forward(g, masked, &teacher_input(original), None)?;
    let lp = g.log_softmax(logits);
    let picked = g.pick(lp, original);
    let s = g.sum(picked);
    Ok((g.scale(s, -1.0), h, original.len()))
}

/// Mean over all tokens in the batch of `-log p(c_t | c_<t; ĉ)`.
pub fn infilling_loss(model: &Seq2Seq, batch: &[(Vec<usize>, Vec<usize>)]) -> Result<f64, NnError> {
    let mut g = Graph::inference();
    let mut total = 0.0;
    let mut count = 0;
    for (orig, masked) in batch {
        let (nll, _, n) = infilling_nll(&mut g, model, orig, masked)?;
        total += g.scalar(nll);
        count += n;
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_bart: f64,
    pub l_cl: f64,
    pub total: f64,
}

/// Writes the loss log as CSV with columns `step,l_bart,l_cl,total`.
pub fn write_loss_log(path: impl AsRef<Path>, records: &[LossRecord]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,l_bart,l_cl,total")?;
    for r in records {
        writeln!(f, "{},{},{},{}", r.step, r.l_bart, r.l_cl, r.total)?;
    }
    f.flush()
}

pub struct PretrainOutput {
    pub checkpoint: Checkpoint<Seq2Seq>,
    pub log: Vec<LossRecord>,
}

/// Optimizes `λ1·L_infill + λ2·L_contrastive` over the corpus.
///
/// Every sentence must carry a pathology label (true or pseudo).
pub fn pretrain_run(corpus: &Corpus, tokenizer: &Tokenizer, config: &PretrainConfig) -> Result<PretrainOutput, PretrainError> {
    config.validate()?;
    let mut label_ids: HashMap<&str, usize> = HashMap::new();
    let mut data = Vec::with_capacity(corpus.len());
    for s in corpus.sentences() {
        let label = s.pathology.as_deref().ok_or_else(|| PretrainError::MissingLabels(s.id.clone()))?;
        let next = label_ids.len();
        let y = *label_ids.entry(label).or_insert(next);
        let ids = tokenizer.encode(&s.text);
        config.model_config(tokenizer.len()).check_len(ids.len())?;
        data.push((ids, y));
    }
    if data.is_empty() {
        return Err(NnError::EmptyCorpus.into());
    }
    let mut model = Seq2Seq::new(config.model_config(tokenizer.len()), config.seed);
    let mut adam = Adam::new(AdamConfig { weight_decay: config.weight_decay, ..AdamConfig::new(config.lr) }, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size) {
            let step = log.len();
            let (record, grads) = {
                let mut g = Graph::new();
                let mut nlls = Vec::with_capacity(batch.len());
                let mut pooled = Vec::with_capacity(batch.len());
                let mut labels = Vec::with_capacity(batch.len());
                let mut tokens = 0;
                for &i in batch {
                    let (ids, y) = &data[i];
                    let masked = mask_for_infilling(ids, config.mask_ratio, rng.random());
                    let (nll, h, n) = infilling_nll(&mut g, &model, ids, &masked)?;
                    nlls.push(nll);
                    pooled.push(g.mean_rows(h));
                    labels.push(*y);
                    tokens += n;
                }
                let all = g.concat_rows(&nlls);
                let s = g.sum(all);
                let l_bart = g.scale(s, 1.0 / tokens as f64);
                let l_cl = if batch.len() >= 2 {
                    let emb = g.concat_rows(&pooled);
                    contrastive_loss_var(&mut g, emb, &labels, config.tau, config.form).0
                } else {
                    None
                };
                let weighted_bart = g.scale(l_bart, config.lambda1);
                let total = match l_cl {
                    Some(cl) if config.lambda2 > 0.0 => {
                        let w = g.scale(cl, config.lambda2);
                        g.add(weighted_bart, w)
                    }
                    _ => weighted_bart,
                };
                let record = LossRecord {
                    step,
                    l_bart: g.scalar(l_bart),
                    l_cl: l_cl.map_or(0.0, |v| g.scalar(v)),
                    total: g.scalar(total),
                };
                if !record.total.is_finite() {
                    return Err(PretrainError::NonFiniteLoss(step));
                }
                let grads = g.backward(total);
                (record, g.param_grads(&grads, &model.params))
            };
            adam.step(&mut model.params, &grads);
            epoch_total += record.total;
            batches += 1;
            log.push(record);
        }
        tracing::info!(epoch, mean_loss = epoch_total / batches.max(1) as f64, "pretraining epoch done");
    }
    let model_config = model.config.clone();
    let mut info = CheckpointInfo::new(ModelKind::Seq2seq, "generator", model_config, tokenizer);
    info.seed = config.seed;
    info.corpus_fingerprint = corpus.fingerprint();
    info.loss_weights = Some(LossWeights { lambda1: config.lambda1, lambda2: config.lambda2 });
    info.config = serde_json::to_value(config).expect("config serializes");
    if let Some(last) = log.last() {
        info.metrics.insert("final_l_bart".into(), last.l_bart);
        info.metrics.insert("final_l_cl".into(), last.l_cl);
    }
    Ok(PretrainOutput { checkpoint: Checkpoint { model, tokenizer: tokenizer.clone(), info }, log })
}

/// Mean cosine similarity of same-label pairs and of different-label pairs.
pub fn class_similarity<L: Eq>(embeddings: &[Array1<f64>], labels: &[L]) -> (f64, f64) {
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let (a, b) = (&embeddings[i], &embeddings[j]);
            let cos = a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt());
            if labels[i] == labels[j] {
                intra += cos;
                n_intra += 1;
            } else {
                inter += cos;
                n_inter += 1;
            }
        }
    }
    (intra / n_intra.max(1) as f64, inter / n_inter.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::tokenizer::CLS;

    #[test]
    fn similarity_examples() {
        assert!((similarity(&[1.0, 0.0], &[1.0, 0.0], 0.07) - 1.0 / 0.07).abs() < 1e-12);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0], 0.07), 0.0);
        assert!((similarity(&[0.6, 0.8], &[1.0, 0.0], 0.5) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn no_positive_batch_is_degenerate() {
        let e = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = contrastive_loss(&e, &["a", "b"], 0.07, ContrastiveForm::LogOfSum);
        assert_eq!(l.value, 0.0);
        assert!(l.degenerate);
        assert_eq!(l.anchors_without_positives, 2);
    }

    #[test]
    fn three_point_example() {
        // [(1,0),(1,0),(0,1)], labels [A,A,B], tau 1: anchors 0 and 1 each have one
        // positive at similarity 1 and one negative at similarity 0.
        let e = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = contrastive_loss(&e, &['A', 'A', 'B'], 1.0, ContrastiveForm::LogOfSum);
        let per = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l.value - 2.0 * per).abs() < 1e-12);
        assert_eq!(l.anchors_without_positives, 1);
        let s = contrastive_loss(&e, &['A', 'A', 'B'], 1.0, ContrastiveForm::SumOfLogs);
        assert!((s.value - 2.0 * per).abs() < 1e-12);
    }

    #[test]
    fn mask_counts() {
        let ids: Vec<usize> = (6..16).collect();
        let m = mask_for_infilling(&ids, 0.3, 9);
        assert_eq!(m.iter().filter(|&&t| t == MASK).count(), 3);
        assert_eq!(m, mask_for_infilling(&ids, 0.3, 9));
        let one = mask_for_infilling(&[7], 0.1, 1);
        assert_eq!(one, vec![MASK]);
        let with_special = mask_for_infilling(&[CLS, 7, 8], 0.9, 1);
        assert_eq!(with_special[0], CLS);
    }

    #[test]
    fn invalid_configs() {
        let ok = PretrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            PretrainConfig { tau: 0.0, ..ok.clone() },
            PretrainConfig { lambda1: 0.0, lambda2: 0.0, ..ok.clone() },
            PretrainConfig { mask_ratio: 1.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
