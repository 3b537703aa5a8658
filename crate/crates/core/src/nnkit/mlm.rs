//! Masked language model used for pseudo-log-likelihood scoring.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{EncoderStack, Linear};
use super::params::{normal, Graph, ParamId, ParamStore};
use super::tape::Var;
use super::tokenizer::MASK;
use super::{NnError, TransformerConfig};

#[derive(Debug, Clone)]
pub struct MaskedLm {
    pub config: TransformerConfig,
    pub params: ParamStore,
    tok: ParamId,
    pos: ParamId,
    encoder: EncoderStack,
    head: Linear,
}

impl MaskedLm {
    pub fn new(config: TransformerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let d = config.d_model;
        let std = (d as f64).powf(-0.5);
        let tok = ps.add("tok_emb", normal(&mut rng, config.vocab_size, d, std));
        let pos = ps.add("pos", normal(&mut rng, config.max_len, d, std));
        let encoder = EncoderStack::new(&mut ps, &mut rng, "enc", config.enc_layers, d, config.n_heads, config.d_ff);
        let head = Linear::new(&mut ps, &mut rng, "lm_head", d, config.vocab_size);
        MaskedLm { config, params: ps, tok, pos, encoder, head }
    }

    /// Zeroes the LM head so every position predicts the uniform distribution.
    pub fn zero_output(&mut self) {
        self.params.get_mut(self.head.w).fill(0.0);
        self.params.get_mut(self.head.b).fill(0.0);
    }

    /// Per-position log-probabilities (L×V).
    pub fn log_probs<'p>(&'p self, g: &mut Graph<'p>, ids: &[usize]) -> Result<Var, NnError> {
        self.config.check_len(ids.len())?;
        let tok = g.param(&self.params, self.tok);
        let pos = g.param(&self.params, self.pos);
        let e = g.gather_rows(tok, ids);
        let p = g.slice_rows(pos, 0, ids.len());
        let x = g.add(e, p);
        let (h, _) = self.encoder.forward(g, &self.params, x);
        let logits = self.head.forward(g, &self.params, h);
        Ok(g.log_softmax(logits))
    }

    /// Mean over positions of log p(token | sentence with that position masked).
    pub fn pll(&self, ids: &[usize]) -> Result<f64, NnError> {
        self.config.check_len(ids.len())?;
        let mut total = 0.0;
        for t in 0..ids.len() {
            let mut masked = ids.to_vec();
            masked[t] = MASK;
            let mut g = Graph::inference();
            let lp = self.log_probs(&mut g, &masked)?;
            total += g.value(lp)[[t, ids[t]]];
        }
        Ok(total / ids.len() as f64)
    }
}
