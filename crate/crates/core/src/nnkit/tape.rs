//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Tape`] records every operation as a node. Values are either owned or
//! borrowed (parameters are borrowed so a forward pass does not copy weights).
//! [`Tape::backward`] walks the nodes in reverse and returns the gradient of a
//! scalar loss with respect to every node that requires one.

use std::borrow::Cow;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Standardize(Var),
    L2Normalize(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    MeanRows(Var),
    MaskedLogSumExp(Var, Array2<f64>),
}

struct Node<'p> {
    value: Cow<'p, Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Epsilon used by [`Tape::standardize`].
pub const NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn row_sums(a: &Array2<f64>) -> Array2<f64> {
    a.sum_axis(Axis(1)).insert_axis(Axis(1))
}

fn col_sums(a: &Array2<f64>) -> Array2<f64> {
    a.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Array2<f64>>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.iter().all(|v| !v.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn op(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// A borrowed leaf, typically a model parameter.
    pub fn borrowed(&mut self, value: &'p Array2<f64>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.op(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.op(value, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.op(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.op(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.op(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a 1×n row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        self.op(value, Op::AddRow(x, row), &[x, row])
    }

    /// Multiplies every row of `x` elementwise by a 1×n row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) * self.value(row);
        self.op(value, Op::MulRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        self.op(value, Op::Scale(x, c), &[x])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        self.op(value, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        self.op(value, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::ln);
        self.op(value, Op::Log(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        self.op(value, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let value = log_softmax_rows(self.value(x));
        self.op(value, Op::LogSoftmax(x), &[x])
    }

    /// Row-wise `(x - mean) / sqrt(var + NORM_EPS)`.
    pub fn standardize(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        self.op(value, Op::Standardize(x), &[x])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        self.op(value, Op::L2Normalize(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        self.op(value, Op::SliceCols(x, start, end), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("row counts agree");
        self.op(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![start..end, ..]).to_owned();
        self.op(value, Op::SliceRows(x, start, end), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("column counts agree");
        self.op(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows of `x` selected by `idx` (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let value = self.value(x).select(Axis(0), idx);
        self.op(value, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    /// n×1 column with `x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), idx.len());
        let value = Array2::from_shape_fn((idx.len(), 1), |(i, _)| xv[[i, idx[i]]]);
        self.op(value, Op::Pick(x, idx.to_vec()), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.op(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// 1×m mean over the rows of an n×m matrix.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.op(value, Op::MeanRows(x), &[x])
    }

    /// n×1 column with `log Σ_j mask[i,j]·exp(x[i,j])`; each row of `mask` needs a nonzero entry.
    pub fn masked_log_sum_exp(&mut self, x: Var, mask: Array2<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(), mask.dim());
        let mut value = Array2::zeros((xv.nrows(), 1));
        for i in 0..xv.nrows() {
            let (row, m) = (xv.row(i), mask.row(i));
            let max = row
                .iter()
                .zip(m.iter())
                .filter(|(_, &w)| w > 0.0)
                .fold(f64::NEG_INFINITY, |acc, (&v, _)| acc.max(v));
            assert!(max.is_finite(), "row {i} of the mask selects nothing");
            let s: f64 = row.iter().zip(m.iter()).map(|(&v, &w)| w * (v - max).exp()).sum();
            value[[i, 0]] = max + s.ln();
        }
        self.op(value, Op::MaskedLogSumExp(x, mask), &[x])
    }

    /// Gradient of the 1×1 node `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        let y = &*node.value;
        let val = |v: &Var| &*self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    self.accumulate(grads, *a, g.dot(&val(b).t()));
                }
                if needs(b) {
                    self.accumulate(grads, *b, val(a).t().dot(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if needs(a) {
                    self.accumulate(grads, *a, g.dot(val(b)));
                }
                if needs(b) {
                    self.accumulate(grads, *b, g.t().dot(val(a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    self.accumulate(grads, *a, g * val(b));
                }
                if needs(b) {
                    self.accumulate(grads, *b, g * val(a));
                }
            }
            Op::AddRow(x, r) => {
                self.accumulate(grads, *x, g.clone());
                if needs(r) {
                    self.accumulate(grads, *r, col_sums(g));
                }
            }
            Op::MulRow(x, r) => {
                if needs(x) {
                    self.accumulate(grads, *x, g * val(r));
                }
                if needs(r) {
                    self.accumulate(grads, *r, col_sums(&(g * val(x))));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g * *c),
            Op::Gelu(x) => {
                let mut d = val(x).mapv(gelu_grad);
                d *= g;
                self.accumulate(grads, *x, d);
            }
            Op::Exp(x) => self.accumulate(grads, *x, g * y),
            Op::Log(x) => self.accumulate(grads, *x, g / val(x)),
            Op::Softmax(x) => {
                let gy = g * y;
                let s = row_sums(&gy);
                self.accumulate(grads, *x, gy - y * &s);
            }
            Op::LogSoftmax(x) => {
                let s = row_sums(g);
                let p = y.mapv(f64::exp);
                self.accumulate(grads, *x, g - &(p * &s));
            }
            Op::Standardize(x) => {
                let xv = val(x);
                let n = xv.ncols() as f64;
                let mut d = Array2::zeros(xv.dim());
                for r in 0..xv.nrows() {
                    let row = xv.row(r);
                    let mean = row.sum() / n;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + NORM_EPS).sqrt();
                    let (gr, yr) = (g.row(r), y.row(r));
                    let gm = gr.sum() / n;
                    let gym = gr.dot(&yr) / n;
                    Zip::from(d.row_mut(r)).and(&gr).and(&yr).for_each(|d, &gv, &yv| {
                        *d = inv * (gv - gm - yv * gym);
                    });
                }
                self.accumulate(grads, *x, d);
            }
            Op::L2Normalize(x) => {
                let xv = val(x);
                let mut d = Array2::zeros(xv.dim());
                for r in 0..xv.nrows() {
                    let norm = xv.row(r).dot(&xv.row(r)).sqrt();
                    let (gr, yr) = (g.row(r), y.row(r));
                    let gy = gr.dot(&yr);
                    Zip::from(d.row_mut(r)).and(&gr).and(&yr).for_each(|d, &gv, &yv| {
                        *d = (gv - yv * gy) / norm;
                    });
                }
                self.accumulate(grads, *x, d);
            }
            Op::SliceCols(x, start, end) => {
                let mut d = Array2::zeros(val(x).dim());
                d.slice_mut(s![.., *start..*end]).assign(g);
                self.accumulate(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = val(p).ncols();
                    if needs(p) {
                        self.accumulate(grads, *p, g.slice(s![.., at..at + w]).to_owned());
                    }
                    at += w;
                }
            }
            Op::SliceRows(x, start, end) => {
                let mut d = Array2::zeros(val(x).dim());
                d.slice_mut(s![*start..*end, ..]).assign(g);
                self.accumulate(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let h = val(p).nrows();
                    if needs(p) {
                        self.accumulate(grads, *p, g.slice(s![at..at + h, ..]).to_owned());
                    }
                    at += h;
                }
            }
            Op::GatherRows(x, idx) => {
                let mut d = Array2::zeros(val(x).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(r);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Pick(x, idx) => {
                let mut d = Array2::zeros(val(x).dim());
                for (r, &c) in idx.iter().enumerate() {
                    d[[r, c]] += g[[r, 0]];
                }
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => self.accumulate(grads, *x, Array2::from_elem(val(x).dim(), g[[0, 0]])),
            Op::MeanRows(x) => {
                let xv = val(x);
                let n = xv.nrows() as f64;
                let row = g / n;
                let d = Array2::from_shape_fn(xv.dim(), |(_, c)| row[[0, c]]);
                self.accumulate(grads, *x, d);
            }
            Op::MaskedLogSumExp(x, mask) => {
                let xv = val(x);
                let d = Array2::from_shape_fn(xv.dim(), |(r, c)| {
                    g[[r, 0]] * mask[[r, c]] * (xv[[r, c]] - y[[r, 0]]).exp()
                });
                self.accumulate(grads, *x, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks the tape gradient of `build` against central differences for every input entry.
    fn check(inputs: Vec<Array2<f64>>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |vals: &[Array2<f64>]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| t.input(v.clone())).collect();
            let out = build(&mut t, &vars);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| t.input(v.clone())).collect();
        let out = build(&mut t, &vars);
        let grads = t.backward(out);
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Array2::zeros(input.dim()));
            for idx in 0..input.len() {
                let (r, c) = (idx / input.ncols(), idx % input.ncols());
                let mut plus = inputs.clone();
                plus[k][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[k][[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
                assert!(err < 1e-5 || (a - numeric).abs() < 1e-8, "input {k} [{r},{c}]: {a} vs {numeric}");
            }
        }
    }

    /// Reduces any matrix to a scalar with distinct per-entry weights.
    fn weighted_sum(t: &mut Tape, x: Var) -> Var {
        let (r, c) = t.value(x).dim();
        let w = t.constant(Array2::from_shape_fn((r, c), |(i, j)| 0.3 + 0.7 * ((i * c + j) as f64).sin()));
        let m = t.mul(x, w);
        t.sum(m)
    }

    #[test]
    fn matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2)], |t, v| {
            let y = t.matmul(v[0], v[1]);
            weighted_sum(t, y)
        });
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 5, 4)], |t, v| {
            let y = t.matmul_bt(v[0], v[1]);
            weighted_sum(t, y)
        });
    }

    #[test]
    fn elementwise_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 3, 4);
        let r = random(&mut rng, 1, 4);
        check(vec![a.clone(), b.clone(), r.clone()], |t, v| {
            let x = t.add(v[0], v[1]);
            let x = t.sub(x, v[1]);
            let x = t.mul(x, v[1]);
            let x = t.add_row(x, v[2]);
            let x = t.mul_row(x, v[2]);
            let x = t.scale(x, -1.7);
            let x = t.gelu(x);
            weighted_sum(t, x)
        });
        let pos = a.mapv(|v| v.abs() + 0.5);
        check(vec![pos], |t, v| {
            let x = t.log(v[0]);
            let x = t.exp(x);
            let x = t.log(x);
            weighted_sum(t, x)
        });
    }

    #[test]
    fn row_normalizers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for op in 0..4 {
            check(vec![random(&mut rng, 3, 5)], |t, v| {
                let x = match op {
                    0 => t.softmax(v[0]),
                    1 => t.log_softmax(v[0]),
                    2 => t.standardize(v[0]),
                    _ => t.l2_normalize(v[0]),
                };
                weighted_sum(t, x)
            });
        }
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![random(&mut rng, 4, 6), random(&mut rng, 4, 2)], |t, v| {
            let a = t.slice_cols(v[0], 1, 4);
            let b = t.concat_cols(&[a, v[1], a]);
            let c = t.slice_rows(b, 1, 3);
            let d = t.concat_rows(&[c, b]);
            let e = t.gather_rows(d, &[0, 2, 2, 5]);
            let f = t.mean_rows(e);
            let p = t.pick(b, &[0, 3, 7, 1]);
            let sp = weighted_sum(t, p);
            let sf = weighted_sum(t, f);
            t.add(sp, sf)
        });
    }

    #[test]
    fn masked_log_sum_exp_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 3, 4);
        let mask = Array2::from_shape_fn((3, 4), |(i, j)| if (i + j) % 3 == 0 { 0.0 } else { 1.0 });
        let mut t = Tape::new();
        let v = t.input(x.clone());
        let out = t.masked_log_sum_exp(v, mask.clone());
        for i in 0..3 {
            let direct: f64 = (0..4).filter(|&j| mask[[i, j]] > 0.0).map(|j| x[[i, j]].exp()).sum::<f64>().ln();
            assert!((t.value(out)[[i, 0]] - direct).abs() < 1e-12);
        }
        check(vec![x], move |t, v| {
            let y = t.masked_log_sum_exp(v[0], mask.clone());
            weighted_sum(t, y)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Array2::ones((2, 2)));
        let x = t.input(Array2::ones((2, 2)));
        let y = t.mul(c, x);
        let s = t.sum(y);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &Array2::<f64>::ones((2, 2)));
    }
}
