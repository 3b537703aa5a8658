//! Encoder-decoder transformer generator with an additive hidden-state offset
//! injected between the final decoder layer norm and the output projection.

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{DecoderLayer, EncoderStack, LayerNorm, Linear};
use super::params::{normal, Graph, ParamId, ParamStore};
use super::tape::Var;
use super::tokenizer::BOS;
use super::{NnError, TransformerConfig};

#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub config: TransformerConfig,
    pub params: ParamStore,
    tok: ParamId,
    pos_enc: ParamId,
    pos_dec: ParamId,
    encoder: EncoderStack,
    decoder: Vec<DecoderLayer>,
    dec_ln: LayerNorm,
    out: Linear,
}

/// Next-token distribution plus the decoder states that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NextToken {
    pub probs: Array1<f64>,
    /// Final-layer decoder states, one row per decoder input position.
    pub hidden: Array2<f64>,
}

impl Seq2Seq {
    pub fn new(config: TransformerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let d = config.d_model;
        let std = (d as f64).powf(-0.5);
        let tok = ps.add("tok_emb", normal(&mut rng, config.vocab_size, d, std));
        let pos_enc = ps.add("pos_enc", normal(&mut rng, config.max_len, d, std));
        let pos_dec = ps.add("pos_dec", normal(&mut rng, config.max_len, d, std));
        let encoder = EncoderStack::new(&mut ps, &mut rng, "enc", config.enc_layers, d, config.n_heads, config.d_ff);
        let decoder = (0..config.dec_layers)
            .map(|i| DecoderLayer::new(&mut ps, &mut rng, &format!("dec.{i}"), d, config.n_heads, config.d_ff))
            .collect();
        let dec_ln = LayerNorm::new(&mut ps, "dec.ln", d);
        let out = Linear::new(&mut ps, &mut rng, "out", d, config.vocab_size);
        Seq2Seq { config, params: ps, tok, pos_enc, pos_dec, encoder, decoder, dec_ln, out }
    }

    /// Zeroes the output projection so every next-token distribution is uniform.
    pub fn zero_output(&mut self) {
        self.params.get_mut(self.out.w).fill(0.0);
        self.params.get_mut(self.out.b).fill(0.0);
    }

    pub fn output_projection(&self) -> &Linear {
        &self.out
    }

    fn embed<'p>(&'p self, g: &mut Graph<'p>, ids: &[usize], pos: ParamId) -> Var {
        let tok = g.param(&self.params, self.tok);
        let pos = g.param(&self.params, pos);
        let e = g.gather_rows(tok, ids);
        let p = g.slice_rows(pos, 0, ids.len());
        g.add(e, p)
    }

    /// Encoder memory for `src`.
    pub fn encode<'p>(&'p self, g: &mut Graph<'p>, src: &[usize]) -> Result<Var, NnError> {
        self.config.check_len(src.len())?;
        let x = self.embed(g, src, self.pos_enc);
        Ok(self.encoder.forward(g, &self.params, x).0)
    }

    /// Final-layer decoder states H for `dec_in` (which starts with BOS).
    pub fn decode_hidden<'p>(&'p self, g: &mut Graph<'p>, memory: Var, dec_in: &[usize]) -> Result<Var, NnError> {
        self.config.check_len(dec_in.len())?;
        let mut x = self.embed(g, dec_in, self.pos_dec);
        for layer in &self.decoder {
            x = layer.forward(g, &self.params, x, memory);
        }
        Ok(self.dec_ln.forward(g, &self.params, x))
    }

    /// Logits from (possibly offset) decoder states.
    pub fn project<'p>(&'p self, g: &mut Graph<'p>, hidden: Var) -> Var {
        self.out.forward(g, &self.params, hidden)
    }

    /// Teacher-forced pass; returns (logits, H). `delta` is added to H before projection.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        src: &[usize],
        dec_in: &[usize],
        delta: Option<Var>,
    ) -> Result<(Var, Var), NnError> {
        let memory = self.encode(g, src)?;
        let h = self.decode_hidden(g, memory, dec_in)?;
        let shifted = match delta {
            Some(d) => g.add(h, d),
            None => h,
        };
        Ok((self.project(g, shifted), h))
    }

    /// Distribution over the token following `prefix` given source `src`.
    ///
    /// `delta` (length d) is added to the last decoder state before projection.
    pub fn next_token(&self, src: &[usize], prefix: &[usize], delta: Option<&Array1<f64>>) -> Result<NextToken, NnError> {
        let dec_in = teacher_input_with_prefix(prefix);
        let mut g = Graph::inference();
        let memory = self.encode(&mut g, src)?;
        let h = self.decode_hidden(&mut g, memory, &dec_in)?;
        let hidden = g.value(h).clone();
        let last = dec_in.len() - 1;
        let mut row = hidden.slice(s![last..=last, ..]).to_owned();
        if let Some(d) = delta {
            row += d;
        }
        let row = g.constant(row);
        let logits = self.project(&mut g, row);
        let p = g.softmax(logits);
        let probs = g.value(p).row(0).to_owned();
        Ok(NextToken { probs, hidden })
    }
}

/// Decoder input predicting every token of `target`: `[BOS, t0, …, t_{n-2}]`.
pub fn teacher_input(target: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(target.len());
    v.push(BOS);
    v.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    v
}

/// `[BOS] + prefix`, the decoder input that predicts the token after `prefix`.
pub fn teacher_input_with_prefix(prefix: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(prefix.len() + 1);
    v.push(BOS);
    v.extend_from_slice(prefix);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Seq2Seq {
        Seq2Seq::new(TransformerConfig::tiny(20), 3)
    }

    #[test]
    fn distribution_sums_to_one_and_is_deterministic() {
        let m = model();
        let a = m.next_token(&[6, 7, 8], &[6, 7], None).unwrap();
        let b = m.next_token(&[6, 7, 8], &[6, 7], None).unwrap();
        assert!((a.probs.sum() - 1.0).abs() < 1e-12);
        assert_eq!(a, b);
        assert_eq!(a.hidden.dim(), (3, 8));
        let zero = Array1::zeros(8);
        let c = m.next_token(&[6, 7, 8], &[6, 7], Some(&zero)).unwrap();
        assert_eq!(a.probs, c.probs);
    }

    #[test]
    fn zeroed_output_is_uniform() {
        let mut m = model();
        m.zero_output();
        let p = m.next_token(&[6, 9], &[], None).unwrap().probs;
        for v in p.iter() {
            assert!((v - 1.0 / 20.0).abs() < 1e-15);
        }
    }

    #[test]
    fn offsets_change_the_distribution() {
        let m = model();
        let base = m.next_token(&[6, 7], &[6], None).unwrap().probs;
        let delta = Array1::from_elem(8, 0.3);
        let moved = m.next_token(&[6, 7], &[6], Some(&delta)).unwrap().probs;
        assert!(base.iter().zip(moved.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn length_limit() {
        let m = model();
        let long = vec![6; 13];
        assert!(matches!(m.next_token(&long, &[], None), Err(NnError::LengthExceeded { len: 13, max: 12 })));
        assert!(matches!(m.next_token(&[], &[], None), Err(NnError::EmptyInput)));
    }

    #[test]
    fn teacher_inputs() {
        assert_eq!(teacher_input(&[7, 8, 9]), vec![BOS, 7, 8]);
        assert_eq!(teacher_input_with_prefix(&[7]), vec![BOS, 7]);
    }
}
