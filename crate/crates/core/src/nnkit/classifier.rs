//! Encoder classifier with a CLS head and last-layer attention saliency.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{EncoderStack, Linear};
use super::params::{normal, Graph, ParamId, ParamStore};
use super::tape::Var;
use super::tokenizer::CLS;
use super::{NnError, TransformerConfig};

/// How per-head CLS attention is combined into one saliency score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone)]
pub struct EncoderClassifier {
    pub config: TransformerConfig,
    pub n_classes: usize,
    pub params: ParamStore,
    tok: ParamId,
    pos: ParamId,
    encoder: EncoderStack,
    head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    /// CLS attention over the input tokens (CLS excluded), renormalized to sum to 1.
    pub saliency: Vec<f64>,
}

impl EncoderClassifier {
    /// `config.max_len` bounds the content length; CLS takes one extra position.
    pub fn new(config: TransformerConfig, n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let d = config.d_model;
        let std = (d as f64).powf(-0.5);
        let tok = ps.add("tok_emb", normal(&mut rng, config.vocab_size, d, std));
        let pos = ps.add("pos", normal(&mut rng, config.max_len + 1, d, std));
        let encoder = EncoderStack::new(&mut ps, &mut rng, "enc", config.enc_layers, d, config.n_heads, config.d_ff);
        let head = Linear::new(&mut ps, &mut rng, "head", d, n_classes);
        EncoderClassifier { config, n_classes, params: ps, tok, pos, encoder, head }
    }

    /// Expected token embeddings under per-position distributions (rows of `dist`).
    pub fn soft_embed<'p>(&'p self, g: &mut Graph<'p>, dist: Var) -> Var {
        let tok = g.param(&self.params, self.tok);
        g.matmul(dist, tok)
    }

    pub fn embed_ids<'p>(&'p self, g: &mut Graph<'p>, ids: &[usize]) -> Var {
        let tok = g.param(&self.params, self.tok);
        g.gather_rows(tok, ids)
    }

    /// Logits (1×C) and last-layer per-head attention for content embeddings (L×d).
    pub fn forward_embedded<'p>(&'p self, g: &mut Graph<'p>, content: Var) -> Result<(Var, Vec<Var>), NnError> {
        let len = g.value(content).nrows();
        self.config.check_len(len)?;
        let tok = g.param(&self.params, self.tok);
        let cls = g.gather_rows(tok, &[CLS]);
        let x = g.concat_rows(&[cls, content]);
        let pos = g.param(&self.params, self.pos);
        let p = g.slice_rows(pos, 0, len + 1);
        let x = g.add(x, p);
        let (h, attn) = self.encoder.forward(g, &self.params, x);
        let cls_state = g.slice_rows(h, 0, 1);
        Ok((self.head.forward(g, &self.params, cls_state), attn))
    }

    pub fn forward_ids<'p>(&'p self, g: &mut Graph<'p>, ids: &[usize]) -> Result<(Var, Vec<Var>), NnError> {
        self.config.check_len(ids.len())?;
        let content = self.embed_ids(g, ids);
        self.forward_embedded(g, content)
    }

    /// Class distribution and mean-over-heads CLS saliency.
    pub fn predict(&self, ids: &[usize]) -> Result<Prediction, NnError> {
        self.predict_with(ids, HeadAggregation::Mean)
    }

    pub fn predict_with(&self, ids: &[usize], agg: HeadAggregation) -> Result<Prediction, NnError> {
        let mut g = Graph::inference();
        let (logits, attn) = self.forward_ids(&mut g, ids)?;
        let p = g.softmax(logits);
        let probs = g.value(p).row(0).to_vec();
        let heads: Vec<&Array2<f64>> = attn.iter().map(|a| g.value(*a)).collect();
        Ok(Prediction { probs, saliency: cls_saliency(&heads, agg) })
    }

    /// Class distribution when each position is a distribution over the vocabulary.
    pub fn predict_soft(&self, dist: &Array2<f64>) -> Result<Vec<f64>, NnError> {
        let mut g = Graph::inference();
        let d = g.constant(dist.clone());
        let x = self.soft_embed(&mut g, d);
        let (logits, _) = self.forward_embedded(&mut g, x)?;
        let p = g.softmax(logits);
        Ok(g.value(p).row(0).to_vec())
    }
}

/// Attention from the CLS query (row 0) to the non-CLS positions, aggregated over heads.
pub fn cls_saliency(heads: &[&Array2<f64>], agg: HeadAggregation) -> Vec<f64> {
    let len = heads[0].ncols() - 1;
    let mut scores = Array1::<f64>::zeros(len);
    for h in heads {
        let row = h.row(0);
        for t in 0..len {
            let v = row[t + 1];
            scores[t] = match agg {
                HeadAggregation::Mean => scores[t] + v / heads.len() as f64,
                HeadAggregation::Max => scores[t].max(v),
            };
        }
    }
    let total = scores.sum();
    if total > 0.0 {
        scores /= total;
    }
    scores.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn clf() -> EncoderClassifier {
        EncoderClassifier::new(TransformerConfig::tiny(15), 2, 5)
    }

    #[test]
    fn single_token_saliency() {
        let p = clf().predict(&[9]).unwrap();
        assert_eq!(p.saliency, vec![1.0]);
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_normalized() {
        let c = clf();
        let a = c.predict(&[6, 7, 8, 9]).unwrap();
        assert_eq!(a, c.predict(&[6, 7, 8, 9]).unwrap());
        assert_eq!(a.saliency.len(), 4);
        assert!(a.saliency.iter().all(|s| *s >= 0.0));
        assert!((a.saliency.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let m = c.predict_with(&[6, 7, 8, 9], HeadAggregation::Max).unwrap();
        assert!((m.saliency.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_soft_input_matches_hard() {
        let c = clf();
        let ids = [6, 11, 7];
        let mut dist = Array2::zeros((3, 15));
        for (i, &t) in ids.iter().enumerate() {
            dist[[i, t]] = 1.0;
        }
        let hard = c.predict(&ids).unwrap().probs;
        let soft = c.predict_soft(&dist).unwrap();
        for (a, b) in hard.iter().zip(&soft) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
