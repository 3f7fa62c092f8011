#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfx_core::forest::Forest;
use rfx_core::proximity::Proximity;
use rfx_core::{ColumnKind, Dataset};

pub fn wine_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/wine.csv")
}

pub fn wine() -> Dataset {
    Dataset::load_csv_numeric(wine_path(), "class").unwrap()
}

/// Gaussian blobs around `k` well-separated centres.
pub fn blobs(n: usize, p: usize, k: usize, spread: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; n * p];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        labels.push((c % 3.min(k)) as u32);
        for j in 0..p {
            let centre = if j % k == c { 10.0 } else { 0.0 } + (c * j) as f64 * 0.5;
            values[j * n + i] = centre + spread * (rng.random::<f64>() - 0.5);
        }
    }
    let classes = 3.min(k).max(2);
    Dataset::new(
        (0..p).map(|j| format!("x{j}")).collect(),
        vec![ColumnKind::Numeric; p],
        values,
        labels,
        (0..classes).map(|c| format!("c{c}")).collect(),
    )
    .unwrap()
}

/// Uniform noise features with random labels.
pub fn noise(n: usize, p: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..n * p)
        .map(|_| (rng.random::<f64>() * 8.0).floor())
        .collect();
    let mut labels: Vec<u32> = (0..n)
        .map(|_| rng.random_range(0..classes as u32))
        .collect();
    labels[0] = 0;
    labels[1] = 1;
    Dataset::new(
        (0..p).map(|j| format!("x{j}")).collect(),
        vec![ColumnKind::Numeric; p],
        values,
        labels,
        (0..classes).map(|c| format!("c{c}")).collect(),
    )
    .unwrap()
}

/// O(n² B) double loop: descend every tree for both samples.
pub fn brute_force_proximity(forest: &Forest, data: &Dataset) -> Vec<Vec<f64>> {
    let n = data.n_samples();
    let b = forest.n_trees();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut same = 0u32;
            for tree in forest.trees() {
                if tree.classify(&data.row(i)) == tree.classify(&data.row(j)) {
                    same += 1;
                }
            }
            p[i][j] = same as f64 / b as f64;
        }
    }
    p
}

pub fn to_dense(prox: &dyn Proximity) -> Vec<Vec<f64>> {
    let n = prox.n();
    (0..n)
        .map(|i| (0..n).map(|j| prox.get(i, j)).collect())
        .collect()
}

/// Cyclic Jacobi eigensolver; returns (eigenvalues, eigenvectors as columns).
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[i][i]).collect();
    let vectors = (0..n).map(|k| (0..n).map(|i| v[i][k]).collect()).collect();
    (values, vectors)
}

/// `-½ H D² H` with `D = pmax - P`, built elementwise.
pub fn dense_gram_oracle(p: &[Vec<f64>], pmax: f64) -> Vec<Vec<f64>> {
    let n = p.len();
    let d2: Vec<Vec<f64>> = p
        .iter()
        .map(|row| row.iter().map(|&x| (pmax - x) * (pmax - x)).collect())
        .collect();
    let row_mean: Vec<f64> = d2
        .iter()
        .map(|r| r.iter().sum::<f64>() / n as f64)
        .collect();
    let col_mean: Vec<f64> = (0..n)
        .map(|j| d2.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let grand: f64 = row_mean.iter().sum::<f64>() / n as f64;
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| -0.5 * (d2[i][j] - row_mean[i] - col_mean[j] + grand))
                .collect()
        })
        .collect()
}

pub fn matvec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

/// Relative Frobenius residual of `y` rotated/reflected onto `x`.
pub fn procrustes_residual(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let k = x[0].len();
    let xm = DMatrix::from_fn(n, k, |i, j| x[i][j]);
    let ym = DMatrix::from_fn(n, k, |i, j| y[i][j]);
    let svd = (ym.transpose() * &xm).svd(true, true);
    let r = svd.u.unwrap() * svd.v_t.unwrap();
    (ym * r - &xm).norm() / xm.norm()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[x].total_cmp(&v[y]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for t in i..=j {
                r[idx[t]] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let m = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / m, rb.iter().sum::<f64>() / m);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Normalized Kendall-τ distance between two score vectors' rankings.
pub fn kendall_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut discordant = 0;
    let mut pairs = 0;
    for i in 0..n {
        for j in i + 1..n {
            pairs += 1;
            if (a[i] - a[j]) * (b[i] - b[j]) < 0.0 {
                discordant += 1;
            }
        }
    }
    discordant as f64 / pairs as f64
}
