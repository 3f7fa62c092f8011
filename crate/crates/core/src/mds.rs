//! Classical multidimensional scaling of proximity-derived distances.
//!
//! Distances are `D = pmax - P` and the embedding comes from the top
//! eigenpairs of the double-centred Gram matrix `G = -½ H D⁽²⁾ H`. For small
//! inputs [`mds_full`] forms `G` and eigendecomposes it. [`mds_lowrank`]
//! never forms an `n × n` matrix: it runs power iteration with implicit
//! deflation on [`GramOperator`], which applies `G` through the low-rank
//! factor.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RfxError};
use crate::proximity::{LowRankQuantized, Proximity};
use crate::rng;

pub const DEFAULT_ORACLE_BOUND: usize = 5000;
pub const MAX_COMPONENTS: usize = 8;
/// Largest `r²` for which `(P∘P)u` goes through an `r × r` intermediate.
pub const KHATRI_RAO_LIMIT: usize = 4096;
/// Rows per block when `(P∘P)u` is streamed.
pub const STREAM_BLOCK: usize = 1024;

const REDUCE_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerIterConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub k: usize,
    pub seed: u64,
}

impl Default for PowerIterConfig {
    fn default() -> Self {
        PowerIterConfig {
            max_iter: 300,
            tol: 1e-8,
            k: 3,
            seed: 0,
        }
    }
}

impl PowerIterConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 || self.k == 0 || self.k > MAX_COMPONENTS {
            return Err(RfxError::config(format!(
                "power iteration needs tol > 0, max_iter > 0 and 1 <= k <= {MAX_COMPONENTS}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdsEmbedding {
    /// One row of `dims` coordinates per sample.
    pub coordinates: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub iterations: Vec<usize>,
    /// `‖G v - λ v‖ / ‖λ v‖` per eigenpair.
    pub residuals: Vec<f64>,
    pub converged: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
}

impl MdsEmbedding {
    pub fn n(&self) -> usize {
        self.coordinates.len()
    }

    pub fn dims(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.coordinates.iter().map(|row| row[k]).collect()
    }

    /// `sample_id,x,y,z[,label]`; missing axes are written as 0.
    pub fn to_csv(&self, labels: Option<&[u32]>) -> String {
        let mut s = String::from("sample_id,x,y,z");
        s.push_str(if labels.is_some() { ",label\n" } else { "\n" });
        for (i, row) in self.coordinates.iter().enumerate() {
            let c = |k: usize| row.get(k).copied().unwrap_or(0.0);
            s.push_str(&format!("{i},{},{},{}", c(0), c(1), c(2)));
            match labels {
                Some(l) => s.push_str(&format!(",{}\n", l[i])),
                None => s.push('\n'),
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let emb: MdsEmbedding = serde_json::from_str(&text)?;
        let dims = emb.dims();
        if emb.coordinates.iter().any(|r| r.len() != dims) {
            return Err(RfxError::format(
                "embedding rows disagree with the eigenvalue count",
            ));
        }
        Ok(emb)
    }
}

/// Flips `v` so its largest-magnitude component is positive.
fn fix_sign(v: &mut [f64]) {
    let pivot = (0..v.len())
        .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
        .unwrap_or(0);
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn center(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// Dense `G = -½ H D⁽²⁾ H` with `D = pmax - P`.
pub fn dense_gram(prox: &dyn Proximity, pmax: f64) -> DMatrix<f64> {
    let n = prox.n();
    let mut d2 = DMatrix::from_fn(n, n, |i, j| (pmax - prox.get(i, j)).powi(2));
    double_center(&mut d2);
    d2
}

/// In place: `A ← -½ H A H`.
pub fn double_center(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    let row_means: Vec<f64> = (0..n).map(|i| a.row(i).sum() / n as f64).collect();
    let col_means: Vec<f64> = (0..n).map(|j| a.column(j).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = -0.5 * (a[(i, j)] - row_means[i] - col_means[j] + grand);
        }
    }
}

fn embedding_from_pairs(
    n: usize,
    pairs: Vec<(f64, Vec<f64>)>,
    iterations: Vec<usize>,
    residuals: Vec<f64>,
    converged: Vec<bool>,
    notice: Option<String>,
) -> MdsEmbedding {
    let coordinates = (0..n)
        .map(|i| {
            pairs
                .iter()
                .map(|(lambda, v)| lambda.sqrt() * v[i])
                .collect()
        })
        .collect();
    MdsEmbedding {
        coordinates,
        eigenvalues: pairs.into_iter().map(|p| p.0).collect(),
        iterations,
        residuals,
        converged,
        notice,
    }
}

/// Embedding from a full symmetric eigendecomposition; `n` is limited to
/// [`DEFAULT_ORACLE_BOUND`].
pub fn mds_full(prox: &dyn Proximity, k: usize) -> Result<MdsEmbedding> {
    mds_full_bounded(prox, k, DEFAULT_ORACLE_BOUND)
}

pub fn mds_full_bounded(prox: &dyn Proximity, k: usize, max_n: usize) -> Result<MdsEmbedding> {
    let n = prox.n();
    if n > max_n {
        return Err(RfxError::config(format!(
            "dense MDS is limited to {max_n} samples, got {n}; use the low-rank path"
        )));
    }
    if n < 2 || k == 0 || k > MAX_COMPONENTS {
        return Err(RfxError::config(format!(
            "dense MDS needs n >= 2 and 1 <= k <= {MAX_COMPONENTS}"
        )));
    }
    // The diagonal is 1 and every entry lies in [0, 1].
    let g = dense_gram(prox, 1.0);
    let eig = SymmetricEigen::new(g.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].abs().max(f64::MIN_POSITIVE);

    let mut pairs = Vec::new();
    let mut residuals = Vec::new();
    for &e in order.iter().take(k) {
        let lambda = eig.eigenvalues[e];
        if lambda <= top * 1e-12 {
            break;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(e).iter().copied().collect();
        fix_sign(&mut v);
        let gv = &g * nalgebra::DVector::from_column_slice(&v);
        let res: f64 = gv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        residuals.push(res / (lambda * norm(&v)));
        pairs.push((lambda, v));
    }
    let found = pairs.len();
    let notice = (found < k)
        .then(|| format!("only {found} positive eigenvalues; returning {found} of {k} axes"));
    Ok(embedding_from_pairs(
        n,
        pairs,
        vec![0; found],
        residuals,
        vec![true; found],
        notice,
    ))
}

/// Sums per-chunk partials in a fixed order, so the result does not depend on
/// the number of workers.
fn chunked_sum<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(REDUCE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            for i in c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(n) {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; len];
    for p in partials {
        total.iter_mut().zip(p).for_each(|(t, x)| *t += x);
    }
    total
}

/// How `(P∘P)u` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HadamardStrategy {
    KhatriRao,
    Streamed,
}

/// Applies `G = -½ H D⁽²⁾ H` through the factor `F` of `P = F Fᵀ`.
///
/// `D⁽²⁾u = pmax²(Σu)1 - 2 pmax P u + (P∘P)u`, with `P u = F(Fᵀu)`. The
/// Hadamard term uses `F_iᵀ (Fᵀ diag(u) F) F_i` for small ranks and streams
/// reconstructed rows otherwise.
pub struct GramOperator<'a> {
    n: usize,
    rank: usize,
    factor: &'a [f64],
    pmax: f64,
    strategy: HadamardStrategy,
}

impl<'a> GramOperator<'a> {
    pub fn new(lowrank: &'a LowRankQuantized) -> Self {
        let rank = lowrank.rank();
        let strategy = if rank * rank <= KHATRI_RAO_LIMIT {
            HadamardStrategy::KhatriRao
        } else {
            HadamardStrategy::Streamed
        };
        GramOperator {
            n: lowrank.n(),
            rank,
            factor: lowrank.factor(),
            pmax: lowrank.pmax(),
            strategy,
        }
    }

    pub fn with_strategy(mut self, strategy: HadamardStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn strategy(&self) -> HadamardStrategy {
        self.strategy
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.factor[i * self.rank..(i + 1) * self.rank]
    }

    fn p_times(&self, u: &[f64]) -> Vec<f64> {
        let r = self.rank;
        let ftu = chunked_sum(self.n, r, |i, acc| {
            let ui = u[i];
            acc.iter_mut()
                .zip(self.row(i))
                .for_each(|(a, f)| *a += f * ui);
        });
        (0..self.n)
            .into_par_iter()
            .map(|i| dot(self.row(i), &ftu))
            .collect()
    }

    fn hadamard_times(&self, u: &[f64]) -> Vec<f64> {
        let r = self.rank;
        match self.strategy {
            HadamardStrategy::KhatriRao => {
                let s = chunked_sum(self.n, r * r, |i, acc| {
                    let f = self.row(i);
                    let ui = u[i];
                    for a in 0..r {
                        let fa = f[a] * ui;
                        for b in 0..r {
                            acc[a * r + b] += fa * f[b];
                        }
                    }
                });
                (0..self.n)
                    .into_par_iter()
                    .map(|i| {
                        let f = self.row(i);
                        (0..r).map(|a| f[a] * dot(&s[a * r..(a + 1) * r], f)).sum()
                    })
                    .collect()
            }
            HadamardStrategy::Streamed => {
                let mut out = vec![0.0; self.n];
                out.par_chunks_mut(STREAM_BLOCK)
                    .enumerate()
                    .for_each(|(blk, chunk)| {
                        let mut prow = vec![0.0; self.n];
                        for (off, o) in chunk.iter_mut().enumerate() {
                            let fi = self.row(blk * STREAM_BLOCK + off);
                            for (j, p) in prow.iter_mut().enumerate() {
                                *p = dot(fi, self.row(j));
                            }
                            *o = prow.iter().zip(u).map(|(p, uj)| p * p * uj).sum();
                        }
                    });
                out
            }
        }
    }

    /// `G v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n, "vector length must equal n");
        let mut u = v.to_vec();
        center(&mut u);
        let sum_u: f64 = u.iter().sum();
        let pu = self.p_times(&u);
        let hu = self.hadamard_times(&u);
        let pm = self.pmax;
        let mut w: Vec<f64> = (0..self.n)
            .map(|i| pm * pm * sum_u - 2.0 * pm * pu[i] + hu[i])
            .collect();
        center(&mut w);
        w.iter_mut().for_each(|x| *x *= -0.5);
        w
    }
}

/// `G v` for the Gram matrix implied by a low-rank factor.
pub fn gram_matvec(lowrank: &LowRankQuantized, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != lowrank.n() {
        return Err(RfxError::data(format!(
            "vector of length {} for n = {}",
            v.len(),
            lowrank.n()
        )));
    }
    Ok(GramOperator::new(lowrank).apply(v))
}

struct PowerResult {
    vector: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn power_iterate(
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    start: &[f64],
    shift: f64,
    cfg: &PowerIterConfig,
) -> Option<PowerResult> {
    let mut v = start.to_vec();
    for t in 1..=cfg.max_iter {
        let mut w = apply(&v);
        if shift != 0.0 {
            w.iter_mut().zip(&v).for_each(|(a, b)| *a += shift * b);
        }
        let nw = norm(&w);
        if nw == 0.0 || !nw.is_finite() {
            return None;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        if dot(&w, &v) < 0.0 {
            w.iter_mut().for_each(|x| *x = -*x);
        }
        let change = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = w;
        if change < cfg.tol {
            return Some(PowerResult {
                vector: v,
                iterations: t,
                converged: true,
            });
        }
    }
    Some(PowerResult {
        vector: v,
        iterations: cfg.max_iter,
        converged: false,
    })
}

/// Top eigenpairs of the factor-implied Gram matrix by power iteration with
/// implicit deflation.
///
/// When the dominant remaining eigenvalue is negative, the iteration is
/// rerun on `G + |λ| I` so that it settles on the largest positive one.
pub fn mds_lowrank(lowrank: &LowRankQuantized, cfg: &PowerIterConfig) -> Result<MdsEmbedding> {
    cfg.validate()?;
    let n = lowrank.n();
    if n < 2 {
        return Err(RfxError::data("MDS needs at least two samples"));
    }
    let op = GramOperator::new(lowrank);
    let mut found: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut iterations = Vec::new();
    let mut residuals = Vec::new();
    let mut converged = Vec::new();
    let mut notice = None;

    for k in 0..cfg.k {
        let deflated = |x: &[f64]| {
            let mut y = op.apply(x);
            for (lambda, v) in &found {
                let c = lambda * dot(v, x);
                y.iter_mut().zip(v).for_each(|(a, b)| *a -= c * b);
            }
            y
        };
        let mut rng = rng::stream(cfg.seed.wrapping_add(k as u64));
        let mut start: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        center(&mut start);
        for (_, v) in &found {
            let c = dot(v, &start);
            start.iter_mut().zip(v).for_each(|(a, b)| *a -= c * b);
        }
        let ns = norm(&start);
        if ns == 0.0 {
            break;
        }
        start.iter_mut().for_each(|x| *x /= ns);

        let Some(mut result) = power_iterate(&deflated, &start, 0.0, cfg) else {
            break;
        };
        let mut lambda = dot(&result.vector, &deflated(&result.vector));
        let mut iters = result.iterations;
        if lambda < 0.0 {
            match power_iterate(&deflated, &start, -lambda, cfg) {
                Some(shifted) => {
                    iters += shifted.iterations;
                    result = shifted;
                    lambda = dot(&result.vector, &deflated(&result.vector));
                }
                None => break,
            }
        }
        let scale = found
            .first()
            .map(|f| f.0)
            .unwrap_or(lambda.abs())
            .max(f64::MIN_POSITIVE);
        if lambda <= scale * 1e-12 {
            break;
        }
        let mut v = result.vector;
        fix_sign(&mut v);
        let gv = op.apply(&v);
        let res = gv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        residuals.push(res / (lambda * norm(&v)));
        iterations.push(iters);
        converged.push(result.converged);
        found.push((lambda, v));
    }
    if found.len() < cfg.k {
        notice = Some(format!(
            "only {} positive eigenvalues; returning {} of {} axes",
            found.len(),
            found.len(),
            cfg.k
        ));
    }
    if let Some(k) = converged.iter().position(|c| !c) {
        let msg = format!(
            "eigenpair {} did not converge in {} iterations",
            k + 1,
            cfg.max_iter
        );
        notice = Some(match notice {
            Some(prev) => format!("{prev}; {msg}"),
            None => msg,
        });
    }
    Ok(embedding_from_pairs(
        n, found, iterations, residuals, converged, notice,
    ))
}

fn pairwise_distances(e: &MdsEmbedding) -> Vec<f64> {
    let n = e.n();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = e.coordinates[i]
                .iter()
                .zip(&e.coordinates[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            d.push(s.sqrt());
        }
    }
    d
}

/// Pearson correlation of the two embeddings' pairwise Euclidean distances.
pub fn mds_correlation(a: &MdsEmbedding, b: &MdsEmbedding) -> Result<f64> {
    if a.n() != b.n() {
        return Err(RfxError::data(format!(
            "embeddings have {} and {} samples",
            a.n(),
            b.n()
        )));
    }
    let (da, db) = (pairwise_distances(a), pairwise_distances(b));
    let m = da.len() as f64;
    let (ma, mb) = (da.iter().sum::<f64>() / m, db.iter().sum::<f64>() / m);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in da.iter().zip(&db) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(RfxError::Degenerate(
            "pairwise distances have zero variance".into(),
        ));
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proximity::QuantMode;

    struct Constant(usize, f64);

    impl Proximity for Constant {
        fn n(&self) -> usize {
            self.0
        }
        fn get(&self, i: usize, j: usize) -> f64 {
            if i == j {
                1.0
            } else {
                self.1
            }
        }
    }

    #[test]
    fn equidistant_points_form_an_equilateral_triangle() {
        let c = 0.4;
        let e = mds_full(&Constant(3, c), 3).unwrap();
        assert_eq!(e.dims(), 2);
        let d = pairwise_distances(&e);
        for x in d {
            assert!((x - (1.0 - c)).abs() < 1e-12, "{x}");
        }
        assert!(e.notice.is_some());
    }

    #[test]
    fn gram_rows_sum_to_zero() {
        let g = dense_gram(&Constant(5, 0.3), 1.0);
        for i in 0..5 {
            assert!(g.row(i).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_of_self_and_rotation_is_one() {
        let coords: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![i as f64, (i * i) as f64 % 5.0, 1.0 / (i + 1) as f64])
            .collect();
        let a = MdsEmbedding {
            coordinates: coords.clone(),
            eigenvalues: vec![1.0; 3],
            iterations: vec![0; 3],
            residuals: vec![0.0; 3],
            converged: vec![true; 3],
            notice: None,
        };
        let (s, c) = (0.3f64.sin(), 0.3f64.cos());
        let mut b = a.clone();
        b.coordinates = coords
            .iter()
            .map(|r| vec![c * r[0] - s * r[1], s * r[0] + c * r[1], -r[2] + 7.0])
            .collect();
        assert!((mds_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((mds_correlation(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_vector_maps_to_zero() {
        let factor: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64 / 10.0).collect();
        let lr = LowRankQuantized::from_factor(10, 2, &factor, QuantMode::F32, 0).unwrap();
        let out = gram_matvec(&lr, &[3.0; 10]).unwrap();
        assert!(out.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn strategies_agree() {
        let factor: Vec<f64> = (0..90)
            .map(|i| (((i * 13) % 11) as f64 - 5.0) / 20.0)
            .collect();
        let lr = LowRankQuantized::from_factor(30, 3, &factor, QuantMode::F32, 0).unwrap();
        let v: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let a = GramOperator::new(&lr).apply(&v);
        let b = GramOperator::new(&lr)
            .with_strategy(HadamardStrategy::Streamed)
            .apply(&v);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = PowerIterConfig {
            tol: 0.0,
            ..Default::default()
        };
        let factor = vec![0.5; 8];
        let lr = LowRankQuantized::from_factor(4, 2, &factor, QuantMode::F32, 0).unwrap();
        assert!(mds_lowrank(&lr, &cfg).is_err());
    }
}
