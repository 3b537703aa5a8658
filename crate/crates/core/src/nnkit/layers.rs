//! Transformer building blocks over a [`Graph`].

use ndarray::Array2;
use rand::Rng;

use super::params::{xavier, Graph, ParamId, ParamStore};
use super::tape::Var;

const MASKED: f64 = -1e30;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = ps.add(format!("{name}.w"), xavier(rng, d_in, d_out));
        let b = ps.add(format!("{name}.b"), Array2::zeros((1, d_out)));
        Linear { w, b }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, ps: &'p ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Array2::ones((1, d)));
        let beta = ps.add(format!("{name}.beta"), Array2::zeros((1, d)));
        LayerNorm { gamma, beta }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, ps: &'p ParamStore, x: Var) -> Var {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        let z = g.standardize(x);
        let z = g.mul_row(z, gamma);
        g.add_row(z, beta)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    d_model: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, d_model: usize, heads: usize) -> Self {
        assert_eq!(d_model % heads, 0, "d_model must be divisible by the head count");
        Attention {
            q: Linear::new(ps, rng, &format!("{name}.q"), d_model, d_model),
            k: Linear::new(ps, rng, &format!("{name}.k"), d_model, d_model),
            v: Linear::new(ps, rng, &format!("{name}.v"), d_model, d_model),
            o: Linear::new(ps, rng, &format!("{name}.o"), d_model, d_model),
            heads,
            d_model,
        }
    }

    /// Returns the attended output and each head's attention matrix (queries × keys).
    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        ps: &'p ParamStore,
        queries: Var,
        keys: Var,
        causal: bool,
    ) -> (Var, Vec<Var>) {
        let q = self.q.forward(g, ps, queries);
        let k = self.k.forward(g, ps, keys);
        let v = self.v.forward(g, ps, keys);
        let (nq, nk) = (g.value(q).nrows(), g.value(k).nrows());
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = causal.then(|| {
            let m = Array2::from_shape_fn((nq, nk), |(i, j)| if j > i { MASKED } else { 0.0 });
            g.constant(m)
        });
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let scores = g.matmul_bt(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let p = g.softmax(scores);
            outs.push(g.matmul(p, vh));
            probs.push(p);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (self.o.forward(g, ps, joined), probs)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, d_model: usize, d_ff: usize) -> Self {
        FeedForward {
            up: Linear::new(ps, rng, &format!("{name}.up"), d_model, d_ff),
            down: Linear::new(ps, rng, &format!("{name}.down"), d_ff, d_model),
        }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, ps: &'p ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, ps, x);
        let h = g.gelu(h);
        self.down.forward(g, ps, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, d_model: usize, heads: usize, d_ff: usize) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d_model),
            attn: Attention::new(ps, rng, &format!("{name}.attn"), d_model, heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d_model),
            ff: FeedForward::new(ps, rng, &format!("{name}.ff"), d_model, d_ff),
        }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, ps: &'p ParamStore, x: Var) -> (Var, Vec<Var>) {
        let h = self.ln1.forward(g, ps, x);
        let (a, probs) = self.attn.forward(g, ps, h, h, false);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, ps, x);
        let f = self.ff.forward(g, ps, h);
        (g.add(x, f), probs)
    }
}

/// Pre-norm causal self-attention, cross-attention and feed-forward block.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, d_model: usize, heads: usize, d_ff: usize) -> Self {
        DecoderLayer {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d_model),
            self_attn: Attention::new(ps, rng, &format!("{name}.self"), d_model, heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d_model),
            cross: Attention::new(ps, rng, &format!("{name}.cross"), d_model, heads),
            ln3: LayerNorm::new(ps, &format!("{name}.ln3"), d_model),
            ff: FeedForward::new(ps, rng, &format!("{name}.ff"), d_model, d_ff),
        }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, ps: &'p ParamStore, x: Var, memory: Var) -> Var {
        let h = self.ln1.forward(g, ps, x);
        let (a, _) = self.self_attn.forward(g, ps, h, h, true);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, ps, x);
        let (c, _) = self.cross.forward(g, ps, h, memory, false);
        let x = g.add(x, c);
        let h = self.ln3.forward(g, ps, x);
        let f = self.ff.forward(g, ps, h);
        g.add(x, f)
    }
}

/// A stack of encoder layers followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    layers: Vec<EncoderLayer>,
    ln: LayerNorm,
}

impl EncoderStack {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        n_layers: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(ps, rng, &format!("{name}.{i}"), d_model, heads, d_ff))
            .collect();
        EncoderStack { layers, ln: LayerNorm::new(ps, &format!("{name}.ln"), d_model) }
    }

    /// Final states and the last layer's per-head attention.
    pub fn forward<'p>(&self, g: &mut Graph<'p>, ps: &'p ParamStore, mut x: Var) -> (Var, Vec<Var>) {
        let mut last = Vec::new();
        for layer in &self.layers {
            let (y, probs) = layer.forward(g, ps, x);
            x = y;
            last = probs;
        }
        (self.ln.forward(g, ps, x), last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn causal_attention_ignores_future_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::new();
        let attn = Attention::new(&mut ps, &mut rng, "a", 8, 2);
        let x = super::super::params::normal(&mut rng, 4, 8, 1.0);
        let mut changed = x.clone();
        changed.row_mut(3).fill(5.0);
        let run = |input: Array2<f64>| {
            let mut g = Graph::inference();
            let v = g.constant(input);
            let (out, probs) = attn.forward(&mut g, &ps, v, v, true);
            for p in &probs {
                assert!(g.value(*p)[[0, 1]] == 0.0);
            }
            g.value(out).clone()
        };
        let (a, b) = (run(x), run(changed));
        for r in 0..3 {
            for c in 0..8 {
                assert!((a[[r, c]] - b[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        let stack = EncoderStack::new(&mut ps, &mut rng, "enc", 2, 8, 4, 16);
        let x = super::super::params::normal(&mut rng, 5, 8, 1.0);
        let mut g = Graph::inference();
        let v = g.constant(x);
        let (_, probs) = stack.forward(&mut g, &ps, v);
        assert_eq!(probs.len(), 4);
        for p in probs {
            for row in g.value(p).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
