use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: 1.0 }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = params.values().iter().map(|p| Array2::zeros(p.dim())).collect();
        Adam { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update; parameters without a gradient only receive weight decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Array2<f64>>]) {
        let c = self.config;
        let norm = grads.iter().flatten().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            Zip::from(p).and(g).and(&mut self.m[i]).and(&mut self.v[i]).for_each(|p, &g, m, v| {
                let g = g * clip + c.weight_decay * *p;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Array2::from_elem((1, 2), 3.0));
        let mut adam = Adam::new(AdamConfig { clip_norm: 0.0, ..AdamConfig::new(0.1) }, &ps);
        for _ in 0..500 {
            let g = ps.get(id) * 2.0;
            adam.step(&mut ps, &[Some(g)]);
        }
        assert!(ps.get(id).iter().all(|v| v.abs() < 1e-2));
    }
}
