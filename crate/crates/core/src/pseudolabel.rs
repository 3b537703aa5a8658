//! Pseudo-labels for corpora without fine-grained pathology labels:
//! embed, reduce to `D` dimensions, cluster with a diagonal Gaussian mixture.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::fingerprint::sha256_hex;
use crate::nnkit::{NnError, Seq2Seq, Tokenizer};
use crate::pretrain::{embed_sentence, pooled_hidden};

#[derive(Debug, thiserror::Error)]
pub enum PseudolabelError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("silhouette needs at least two non-empty clusters")]
    SingleCluster,
    #[error("cluster model was fitted on corpus {expected}, got {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Fingerprint over ids and texts only, so relabeling keeps it stable.
pub fn text_fingerprint(corpus: &Corpus) -> String {
    let mut body = String::new();
    for s in corpus.sentences() {
        body.push_str(&s.id);
        body.push('\t');
        body.push_str(&s.text);
        body.push('\n');
    }
    sha256_hex(body.as_bytes())
}

/// One pooled embedding row per sentence, in corpus order.
pub fn extract_embeddings(
    corpus: &Corpus,
    model: &Seq2Seq,
    tokenizer: &Tokenizer,
    normalize: bool,
) -> Result<Array2<f64>, PseudolabelError> {
    let d = model.config.d_model;
    let mut out = Array2::zeros((corpus.len(), d));
    for (i, s) in corpus.sentences().iter().enumerate() {
        let ids = tokenizer.encode(&s.text);
        let v = if normalize { embed_sentence(model, &ids)? } else { pooled_hidden(model, &ids)? };
        out.row_mut(i).assign(&v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceMethod {
    #[default]
    Pca,
    Neighborhood,
}

/// Fitted dimensionality reduction that can project new points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Reducer {
    Pca {
        mean: Vec<f64>,
        /// d × D, one principal direction per column.
        components: Vec<Vec<f64>>,
        /// Variance captured by each kept direction.
        explained_variance: Vec<f64>,
    },
    Neighborhood {
        k: usize,
        inputs: Vec<Vec<f64>>,
        embedding: Vec<Vec<f64>>,
    },
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Array2<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j])
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

impl Reducer {
    pub fn output_dim(&self) -> usize {
        match self {
            Reducer::Pca { explained_variance, .. } => explained_variance.len(),
            Reducer::Neighborhood { embedding, .. } => embedding.first().map_or(0, Vec::len),
        }
    }

    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Reducer::Pca { mean, components, .. } => {
                let mean = Array1::from(mean.clone());
                let w = from_rows(components);
                (x - &mean).dot(&w)
            }
            Reducer::Neighborhood { k, inputs, embedding } => {
                let dim = self.output_dim();
                let mut out = Array2::zeros((x.nrows(), dim));
                for (r, row) in x.rows().into_iter().enumerate() {
                    let row = row.to_vec();
                    let mut d: Vec<(f64, usize)> =
                        inputs.iter().enumerate().map(|(i, p)| (sq_dist(&row, p).sqrt(), i)).collect();
                    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    let near = &d[..(*k).min(d.len())];
                    if near[0].0 == 0.0 {
                        out.row_mut(r).assign(&Array1::from(embedding[near[0].1].clone()));
                        continue;
                    }
                    let total: f64 = near.iter().map(|(dist, _)| 1.0 / dist).sum();
                    for (dist, i) in near {
                        for c in 0..dim {
                            out[[r, c]] += embedding[*i][c] / dist / total;
                        }
                    }
                }
                out
            }
        }
    }
}

/// Projection of `x` to `dim` columns plus the fitted reducer.
pub fn reduce(x: &Array2<f64>, dim: usize, method: ReduceMethod, seed: u64) -> Result<(Array2<f64>, Reducer), PseudolabelError> {
    let (n, d) = x.dim();
    if dim == 0 || dim >= d || n <= dim {
        return Err(PseudolabelError::InvalidInput(format!("need 0 < D < d and n > D (n={n}, d={d}, D={dim})")));
    }
    let pca = pca(x, dim);
    match method {
        ReduceMethod::Pca => {
            let y = pca.transform(x);
            Ok((y, pca))
        }
        ReduceMethod::Neighborhood => {
            let init = pca.transform(x);
            let y = neighborhood_embedding(x, init, seed);
            let k = 15.min(n - 1);
            Ok((y.clone(), Reducer::Neighborhood { k, inputs: to_rows(x), embedding: to_rows(&y) }))
        }
    }
}

fn pca(x: &Array2<f64>, dim: usize) -> Reducer {
    let (n, d) = x.dim();
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let m = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut components = vec![vec![0.0; dim]; d];
    let mut explained = Vec::with_capacity(dim);
    let mut deficient = 0;
    for (c, &k) in order.iter().take(dim).enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda <= 1e-12 * top.max(1e-300) {
            deficient += 1;
            explained.push(0.0);
            continue;
        }
        let v = eig.eigenvectors.column(k);
        let pivot = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a))).expect("d > 0");
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (i, row) in components.iter_mut().enumerate() {
            row[c] = sign * v[i];
        }
        explained.push(lambda);
    }
    if deficient > 0 {
        tracing::warn!(deficient, "fewer non-degenerate directions than requested; padding with zeros");
    }
    Reducer::Pca { mean: mean.to_vec(), components, explained_variance: explained }
}

/// Neighbor-graph embedding: fuzzy kNN affinities optimized by attractive and
/// negative-sampled repulsive updates, starting from `init`.
fn neighborhood_embedding(x: &Array2<f64>, init: Array2<f64>, seed: u64) -> Array2<f64> {
    let n = x.nrows();
    let k = 15.min(n - 1);
    let rows = to_rows(x);
    let mut edges: std::collections::BTreeMap<(usize, usize), f64> = std::collections::BTreeMap::new();
    for i in 0..n {
        let mut d: Vec<(f64, usize)> =
            (0..n).filter(|&j| j != i).map(|j| (sq_dist(&rows[i], &rows[j]).sqrt(), j)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let near = &d[..k];
        let rho = near[0].0;
        let target = (k as f64).log2();
        let (mut lo, mut hi, mut sigma) = (1e-12, f64::INFINITY, 1.0);
        for _ in 0..64 {
            let s: f64 = near.iter().map(|(dist, _)| (-(dist - rho).max(0.0) / sigma).exp()).sum();
            if (s - target).abs() < 1e-5 {
                break;
            }
            if s > target {
                hi = sigma;
                sigma = (lo + hi) / 2.0;
            } else {
                lo = sigma;
                sigma = if hi.is_finite() { (lo + hi) / 2.0 } else { sigma * 2.0 };
            }
        }
        for (dist, j) in near {
            let w = (-(dist - rho).max(0.0) / sigma).exp();
            let key = (i.min(*j), i.max(*j));
            let prev = edges.get(&key).copied().unwrap_or(0.0);
            edges.insert(key, prev + w - prev * w);
        }
    }
    let edges: Vec<(usize, usize, f64)> = edges.into_iter().map(|((i, j), w)| (i, j, w)).collect();
    let (a, b) = (1.577, 0.895);
    let mut y = init;
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    y.mapv_inplace(|v| 10.0 * v / scale);
    let dim = y.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let epochs = 200;
    let mut order: Vec<usize> = (0..edges.len()).collect();
    for epoch in 0..epochs {
        let alpha = 1.0 - epoch as f64 / epochs as f64;
        order.shuffle(&mut rng);
        for &e in &order {
            let (i, j, w) = edges[e];
            if rng.random::<f64>() > w {
                continue;
            }
            let d2 = (0..dim).map(|c| (y[[i, c]] - y[[j, c]]).powi(2)).sum::<f64>();
            let coef = if d2 > 0.0 { -2.0 * a * b * d2.powf(b - 1.0) / (1.0 + a * d2.powf(b)) } else { 0.0 };
            for c in 0..dim {
                let g = (coef * (y[[i, c]] - y[[j, c]])).clamp(-4.0, 4.0) * alpha;
                y[[i, c]] += g;
                y[[j, c]] -= g;
            }
            for _ in 0..5 {
                let m = rng.random_range(0..n);
                if m == i {
                    continue;
                }
                let d2 = (0..dim).map(|c| (y[[i, c]] - y[[m, c]]).powi(2)).sum::<f64>();
                let coef = 2.0 * b / ((0.001 + d2) * (1.0 + a * d2.powf(b)));
                for c in 0..dim {
                    let g = (coef * (y[[i, c]] - y[[m, c]])).clamp(-4.0, 4.0) * alpha;
                    y[[i, c]] += g;
                }
            }
        }
    }
    y
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub k: usize,
    pub n_init: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub var_floor: f64,
}

impl GmmConfig {
    pub fn new(k: usize, n_init: usize, seed: u64) -> Self {
        GmmConfig { k, n_init, seed, tol: 1e-6, max_iter: 200, var_floor: 1e-6 }
    }
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl Gmm {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Per-point log joint densities `log w_k + log N(x | μ_k, σ²_k)` (n × K).
    fn log_joint(&self, x: &Array2<f64>) -> Array2<f64> {
        let d = x.ncols() as f64;
        let mut out = Array2::zeros((x.nrows(), self.k()));
        for k in 0..self.k() {
            let (mu, var) = (&self.means[k], &self.variances[k]);
            let log_det: f64 = var.iter().map(|v| v.ln()).sum();
            let base = self.weights[k].ln() - 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det);
            for (i, row) in x.rows().into_iter().enumerate() {
                let q: f64 = row.iter().zip(mu).zip(var).map(|((xv, m), v)| (xv - m).powi(2) / v).sum();
                out[[i, k]] = base - 0.5 * q;
            }
        }
        out
    }

    /// Responsibilities and mean per-point log-likelihood.
    pub fn responsibilities(&self, x: &Array2<f64>) -> (Array2<f64>, f64) {
        let mut lj = self.log_joint(x);
        let mut total = 0.0;
        for mut row in lj.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse;
            row.mapv_inplace(|v| (v - lse).exp());
        }
        (lj, total / x.nrows() as f64)
    }

    /// Component with the largest responsibility for each row (first on ties).
    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let (resp, _) = self.responsibilities(x);
        resp.rows().into_iter().map(|r| crate::nnkit::argmax(&r.to_vec())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub gmm: Gmm,
    pub assignments: Vec<usize>,
    /// Mean per-point log-likelihood of the kept restart.
    pub log_likelihood: f64,
    /// Log-likelihood after every EM iteration, per restart.
    pub history: Vec<Vec<f64>>,
    pub best_restart: usize,
    /// Some variance hit the floor.
    pub floored: bool,
}

fn kmeans(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = x.nrows();
    let rows = to_rows(x);
    let mut centers = vec![rows[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> =
            rows.iter().map(|r| centers.iter().map(|c| sq_dist(r, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, v) in d2.iter().enumerate() {
                if t < *v {
                    pick = i;
                    break;
                }
                t -= v;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(rows[next].clone());
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let best = (0..k).min_by(|&a, &b| sq_dist(r, &centers[a]).total_cmp(&sq_dist(r, &centers[b]))).expect("k ≥ 1");
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = rows.iter().zip(&assign).filter(|(_, a)| **a == c).map(|(r, _)| r).collect();
            if members.is_empty() {
                continue;
            }
            for (j, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    assign
}

fn m_step(x: &Array2<f64>, resp: &Array2<f64>, prev: Option<&Gmm>, floor: f64, floored: &mut bool) -> Gmm {
    let (n, d) = x.dim();
    let k = resp.ncols();
    let mut gmm = Gmm { weights: vec![0.0; k], means: vec![vec![0.0; d]; k], variances: vec![vec![1.0; d]; k] };
    for c in 0..k {
        let col = resp.column(c);
        let nk: f64 = col.sum();
        if nk < 1e-12 {
            if let Some(p) = prev {
                gmm.means[c] = p.means[c].clone();
                gmm.variances[c] = p.variances[c].clone();
            }
            gmm.weights[c] = 1e-12;
            continue;
        }
        gmm.weights[c] = nk / n as f64;
        for j in 0..d {
            let mean = col.iter().zip(x.column(j)).map(|(r, v)| r * v).sum::<f64>() / nk;
            let var = col.iter().zip(x.column(j)).map(|(r, v)| r * (v - mean).powi(2)).sum::<f64>() / nk;
            gmm.means[c][j] = mean;
            if var < floor {
                *floored = true;
            }
            gmm.variances[c][j] = var.max(floor);
        }
    }
    let total: f64 = gmm.weights.iter().sum();
    gmm.weights.iter_mut().for_each(|w| *w /= total);
    gmm
}

/// EM with k-means initialization and `n_init` restarts; keeps the restart with
/// the best log-likelihood (ties to the earliest).
pub fn fit_gmm(x: &Array2<f64>, cfg: &GmmConfig) -> Result<GmmFit, PseudolabelError> {
    let n = x.nrows();
    if cfg.k < 2 || n < cfg.k || cfg.n_init == 0 {
        return Err(PseudolabelError::InvalidInput(format!("need K ≥ 2, n ≥ K and n_init ≥ 1 (n={n}, K={})", cfg.k)));
    }
    let mut best: Option<GmmFit> = None;
    let mut history = Vec::with_capacity(cfg.n_init);
    let mut floored = false;
    for restart in 0..cfg.n_init {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(restart as u64));
        let init = kmeans(x, cfg.k, &mut rng);
        let mut resp = Array2::zeros((n, cfg.k));
        for (i, &c) in init.iter().enumerate() {
            resp[[i, c]] = 1.0;
        }
        let mut gmm = m_step(x, &resp, None, cfg.var_floor, &mut floored);
        let mut lls = Vec::new();
        let mut prev_ll = f64::NEG_INFINITY;
        for _ in 0..cfg.max_iter {
            let (r, ll) = gmm.responsibilities(x);
            lls.push(ll);
            if ll - prev_ll < cfg.tol {
                break;
            }
            prev_ll = ll;
            gmm = m_step(x, &r, Some(&gmm), cfg.var_floor, &mut floored);
        }
        let ll = *lls.last().expect("at least one iteration");
        history.push(lls);
        if best.as_ref().is_none_or(|b| ll > b.log_likelihood) {
            let assignments = gmm.predict(x);
            best = Some(GmmFit { gmm, assignments, log_likelihood: ll, history: Vec::new(), best_restart: restart, floored });
        }
    }
    if floored {
        tracing::warn!("a mixture component collapsed; variance floor {} applied", cfg.var_floor);
    }
    let mut fit = best.expect("n_init ≥ 1");
    fit.history = history;
    fit.floored = floored;
    Ok(fit)
}

/// Mean silhouette with Euclidean distance; points alone in their cluster score 0.
pub fn silhouette(x: &Array2<f64>, assignments: &[usize]) -> Result<f64, PseudolabelError> {
    let n = x.nrows();
    assert_eq!(n, assignments.len());
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(PseudolabelError::SingleCluster);
    }
    let rows = to_rows(x);
    let mut total = 0.0;
    for i in 0..n {
        let own = assignments[i];
        if sizes[own] < 2 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[assignments[j]] += sq_dist(&rows[i], &rows[j]).sqrt();
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudolabelConfig {
    pub k: usize,
    pub dim: usize,
    pub method: ReduceMethod,
    pub n_init: usize,
    pub seed: u64,
    /// L2-normalize embeddings before reduction.
    pub normalize: bool,
}

impl Default for PseudolabelConfig {
    fn default() -> Self {
        PseudolabelConfig { k: 14, dim: 256, method: ReduceMethod::Pca, n_init: 3, seed: 42, normalize: true }
    }
}

/// Reducer, mixture and per-sentence assignments for one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub config: PseudolabelConfig,
    pub reducer: Reducer,
    pub gmm: Gmm,
    pub assignments: Vec<usize>,
    pub silhouette: f64,
    pub log_likelihood: f64,
    pub corpus_fingerprint: String,
    pub generator_fingerprint: String,
}

impl ClusterModel {
    /// Cluster of a new sentence under this model.
    pub fn label_of(&self, model: &Seq2Seq, tokenizer: &Tokenizer, text: &str) -> Result<usize, NnError> {
        let ids = tokenizer.encode(text);
        let v = if self.config.normalize { embed_sentence(model, &ids)? } else { pooled_hidden(model, &ids)? };
        let x = v.insert_axis(Axis(0));
        Ok(self.gmm.predict(&self.reducer.transform(&x))[0])
    }
}

pub fn cluster_label(id: usize) -> String {
    format!("cluster-{id}")
}

/// Embeds, reduces and clusters `corpus` with the generator.
pub fn fit_cluster_model(
    corpus: &Corpus,
    model: &Seq2Seq,
    tokenizer: &Tokenizer,
    cfg: &PseudolabelConfig,
) -> Result<ClusterModel, PseudolabelError> {
    let emb = extract_embeddings(corpus, model, tokenizer, cfg.normalize)?;
    let (reduced, reducer) = reduce(&emb, cfg.dim, cfg.method, cfg.seed)?;
    let fit = fit_gmm(&reduced, &GmmConfig::new(cfg.k, cfg.n_init, cfg.seed))?;
    let silhouette = silhouette(&reduced, &fit.assignments).unwrap_or(0.0);
    Ok(ClusterModel {
        config: cfg.clone(),
        reducer,
        gmm: fit.gmm,
        assignments: fit.assignments,
        silhouette,
        log_likelihood: fit.log_likelihood,
        corpus_fingerprint: text_fingerprint(corpus),
        generator_fingerprint: sha256_hex(
            &model.params.flatten().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>(),
        ),
    })
}

/// Sets each sentence's pathology to `cluster-<id>`.
pub fn assign_pseudolabels(corpus: &Corpus, model: &ClusterModel) -> Result<Corpus, PseudolabelError> {
    let found = text_fingerprint(corpus);
    if found != model.corpus_fingerprint {
        return Err(PseudolabelError::FingerprintMismatch { expected: model.corpus_fingerprint.clone(), found });
    }
    let sentences = corpus
        .sentences()
        .iter()
        .zip(&model.assignments)
        .map(|(s, &c)| {
            let mut s = s.clone();
            s.pathology = Some(cluster_label(c));
            s
        })
        .collect();
    Ok(Corpus::new(sentences, format!("{} [pseudo-labeled]", corpus.provenance)).expect("relabeling keeps validity"))
}
