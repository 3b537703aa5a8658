use std::collections::{HashMap, HashSet};
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tape::{Grads, Tape, Var};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors of one model.
///
/// Every store carries a process-unique id so a [`Graph`] can bind parameters
/// from several models (for example a generator and a classifier) at once.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed), names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn shapes(&self) -> Vec<(String, [usize; 2])> {
        self.names.iter().zip(&self.values).map(|(n, v)| (n.clone(), [v.nrows(), v.ncols()])).collect()
    }

    /// All parameters concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten`]; fails when the length differs.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), String> {
        if flat.len() != self.num_scalars() {
            return Err(format!("expected {} values, found {}", self.num_scalars(), flat.len()));
        }
        let mut at = 0;
        for v in &mut self.values {
            let n = v.len();
            for (dst, src) in v.iter_mut().zip(&flat[at..at + n]) {
                *dst = *src;
            }
            at += n;
        }
        Ok(())
    }
}

/// Glorot-uniform matrix.
pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// A [`Tape`] plus lazily bound parameters.
pub struct Graph<'p> {
    tape: Tape<'p>,
    bound: HashMap<(u64, usize), Var>,
    frozen: HashSet<u64>,
    freeze_all: bool,
}

impl<'p> Deref for Graph<'p> {
    type Target = Tape<'p>;
    fn deref(&self) -> &Tape<'p> {
        &self.tape
    }
}

impl<'p> DerefMut for Graph<'p> {
    fn deref_mut(&mut self) -> &mut Tape<'p> {
        &mut self.tape
    }
}

impl<'p> Default for Graph<'p> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// Parameters bound on this graph track gradients.
    pub fn new() -> Self {
        Graph { tape: Tape::new(), bound: HashMap::new(), frozen: HashSet::new(), freeze_all: false }
    }

    /// No parameter tracks gradients.
    pub fn inference() -> Self {
        Graph { freeze_all: true, ..Self::new() }
    }

    /// Binds the parameters of `store` as constants from now on.
    pub fn freeze(&mut self, store: &ParamStore) {
        self.frozen.insert(store.uid);
    }

    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        let key = (store.uid, id.0);
        if let Some(v) = self.bound.get(&key) {
            return *v;
        }
        let grad = !self.freeze_all && !self.frozen.contains(&store.uid);
        let v = self.tape.borrowed(store.get(id), grad);
        self.bound.insert(key, v);
        v
    }

    /// The node a parameter is bound to, if the forward pass used it.
    pub fn bound(&self, store: &ParamStore, id: ParamId) -> Option<Var> {
        self.bound.get(&(store.uid, id.0)).copied()
    }

    /// Per-parameter gradients for `store`; unused parameters get `None`.
    pub fn param_grads(&self, grads: &Grads, store: &ParamStore) -> Vec<Option<Array2<f64>>> {
        (0..store.len())
            .map(|i| self.bound.get(&(store.uid, i)).and_then(|v| grads.get(*v)).cloned())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::new();
        ps.add("a", xavier(&mut rng, 3, 2));
        ps.add("b", normal(&mut rng, 1, 4, 0.1));
        let flat = ps.flatten();
        assert_eq!(flat.len(), 10);
        let mut other = ps.clone();
        other.values_mut()[0].fill(0.0);
        other.load_flat(&flat).unwrap();
        assert_eq!(other, ps);
        assert!(other.load_flat(&flat[1..]).is_err());
    }

    #[test]
    fn frozen_stores_bind_as_constants() {
        let mut a = ParamStore::new();
        let ia = a.add("w", Array2::ones((1, 1)));
        let mut b = ParamStore::new();
        let ib = b.add("w", Array2::ones((1, 1)));
        let mut g = Graph::new();
        g.freeze(&b);
        let va = g.param(&a, ia);
        let vb = g.param(&b, ib);
        assert_eq!(g.param(&a, ia), va);
        assert!(g.requires_grad(va));
        assert!(!g.requires_grad(vb));
    }
}
