mod common;

use common::{dense_gram_oracle, jacobi_eigen, matvec, noise, procrustes_residual, to_dense};
use rfx_core::forest::{train, TrainConfig};
use rfx_core::mds::*;
use rfx_core::proximity::*;

fn membership(n: usize, trees: usize, seed: u64) -> LeafMembership {
    let data = noise(n, 4, 3, seed);
    let forest = train(&data, &TrainConfig::new(trees, seed)).unwrap();
    leaf_membership(&forest, &data).unwrap()
}

fn raw_product(lr: &LowRankQuantized) -> Vec<Vec<f64>> {
    let n = lr.n();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    lr.factor_row(i)
                        .iter()
                        .zip(lr.factor_row(j))
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / b.iter().map(|y| y * y).sum::<f64>().sqrt()
}

fn test_vector(n: usize, seed: u64) -> Vec<f64> {
    (0..n)
        .map(|i| ((i as u64 * 7919 + seed * 104729) % 1000) as f64 / 500.0 - 1.0)
        .collect()
}

#[test]
fn dense_eigenvalues_match_jacobi_on_twenty_samples() {
    let m = membership(20, 25, 3);
    let full = full_proximity(&m, None).unwrap();
    let emb = mds_full(&full, 3).unwrap();
    let (mut values, _) = jacobi_eigen(&dense_gram_oracle(&to_dense(&full), 1.0));
    values.sort_by(|a, b| b.total_cmp(a));
    for (k, lambda) in emb.eigenvalues.iter().enumerate() {
        assert!(
            (lambda - values[k]).abs() <= 1e-8 * values[0],
            "axis {k}: {lambda} vs {}",
            values[k]
        );
    }
}

#[test]
fn gram_rows_sum_to_zero() {
    let m = membership(25, 10, 4);
    let full = full_proximity(&m, None).unwrap();
    let g = dense_gram(&full, 1.0);
    for i in 0..25 {
        assert!(g.row(i).sum().abs() < 1e-12);
    }
}

#[test]
fn equidistant_triangle_has_closed_form_edges() {
    let c = 0.3;
    let full = FullTriangle::from_packed(3, vec![c; 3]).unwrap();
    let emb = mds_full(&full, 2).unwrap();
    let edge = 1.0 - c;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let d: f64 = emb.coordinates[i]
            .iter()
            .zip(&emb.coordinates[j])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((d - edge).abs() < 1e-12);
    }
}

#[test]
fn gram_matvec_matches_dense_construction() {
    for (n, rank, mode) in [
        (30, 30, QuantMode::F32),
        (30, 12, QuantMode::I8),
        (40, 20, QuantMode::Nf4),
        (30, 30, QuantMode::F16),
    ] {
        let m = membership(n, 15, n as u64);
        let lr = lowrank_proximity(&m, rank, mode, 1).unwrap();
        let g = dense_gram_oracle(&raw_product(&lr), lr.pmax());
        for seed in 0..3 {
            let v = test_vector(n, seed);
            assert!(rel_err(&gram_matvec(&lr, &v).unwrap(), &matvec(&g, &v)) <= 1e-10);
        }
    }
}

#[test]
fn khatri_rao_and_streamed_paths_agree() {
    let m = membership(60, 20, 5);
    let lr = lowrank_proximity(&m, 40, QuantMode::I8, 2).unwrap();
    let v = test_vector(60, 1);
    let a = GramOperator::new(&lr)
        .with_strategy(HadamardStrategy::KhatriRao)
        .apply(&v);
    let b = GramOperator::new(&lr)
        .with_strategy(HadamardStrategy::Streamed)
        .apply(&v);
    assert!(rel_err(&a, &b) <= 1e-12);
}

#[test]
fn gram_error_grows_as_precision_drops() {
    let m = membership(50, 20, 8);
    let exact = full_proximity(&m, None).unwrap();
    let g = dense_gram_oracle(&to_dense(&exact), 1.0);
    let v = test_vector(50, 2);
    let reference = matvec(&g, &v);
    let errors: Vec<f64> = [
        QuantMode::F32,
        QuantMode::F16,
        QuantMode::I8,
        QuantMode::Nf4,
    ]
    .into_iter()
    .map(|mode| {
        rel_err(
            &gram_matvec(&lowrank_proximity(&m, 50, mode, 3).unwrap(), &v).unwrap(),
            &reference,
        )
    })
    .collect();
    assert!(errors[0] <= 1e-6, "{errors:?}");
    assert!(errors.windows(2).all(|w| w[0] < w[1]), "{errors:?}");
}

#[test]
fn gram_matvec_is_linear_and_kills_constants() {
    let m = membership(30, 10, 9);
    let lr = lowrank_proximity(&m, 10, QuantMode::I8, 0).unwrap();
    let v = test_vector(30, 5);
    let gv = gram_matvec(&lr, &v).unwrap();
    let scaled: Vec<f64> = v.iter().map(|x| 2.5 * x).collect();
    let g_scaled = gram_matvec(&lr, &scaled).unwrap();
    for (a, b) in g_scaled.iter().zip(&gv) {
        assert!((a - 2.5 * b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
    let ones = gram_matvec(&lr, &vec![1.0; 30]).unwrap();
    assert!(ones.iter().all(|x| x.abs() < 1e-12));
    assert!(gram_matvec(&lr, &[1.0; 29]).is_err());
}

#[test]
fn factor_embedding_matches_dense_after_procrustes() {
    for (n, trees, seed) in [(30, 20, 11), (30, 40, 12), (120, 30, 13)] {
        let m = membership(n, trees, seed);
        let full = full_proximity(&m, None).unwrap();
        let lr = lowrank_proximity(&m, n.min(m.total_leaves()), QuantMode::F32, 1).unwrap();
        let dense = mds_full(&full, 3).unwrap();
        let cfg = PowerIterConfig {
            max_iter: 5000,
            tol: 1e-12,
            ..Default::default()
        };
        let fact = mds_lowrank(&lr, &cfg).unwrap();
        assert_eq!(fact.dims(), 3);
        let res = procrustes_residual(&dense.coordinates, &fact.coordinates);
        assert!(res <= 1e-4, "n={n}: residual {res}");
        assert!(
            fact.residuals.iter().all(|&r| r <= 1e-6),
            "{:?}",
            fact.residuals
        );
    }
}

#[test]
fn axes_are_centred_orthogonal_and_ordered() {
    let m = membership(80, 30, 14);
    let lr = lowrank_proximity(&m, 32, QuantMode::I8, 1).unwrap();
    let emb = mds_lowrank(&lr, &PowerIterConfig::default()).unwrap();
    for k in 0..emb.dims() {
        let col = emb.column(k);
        let scale = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(col.iter().sum::<f64>().abs() <= 1e-6 * scale);
        for l in k + 1..emb.dims() {
            let other = emb.column(l);
            let dot: f64 = col.iter().zip(&other).map(|(a, b)| a * b).sum();
            let on = other.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(dot.abs() <= 1e-6 * scale * on);
        }
    }
    assert!(emb.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    assert!(emb.eigenvalues.iter().all(|&l| l > 0.0));
}

#[test]
fn rank_one_factor_collapses_to_one_axis() {
    let n = 40;
    let factor: Vec<f64> = (0..n).map(|i| 0.5 + 0.4 * (i as f64 / n as f64)).collect();
    let lr = LowRankQuantized::from_factor(n, 1, &factor, QuantMode::F32, 0).unwrap();
    let emb = mds_lowrank(&lr, &PowerIterConfig::default()).unwrap();
    assert!(!emb.eigenvalues.is_empty());
    for lambda in &emb.eigenvalues[1..] {
        assert!(
            lambda.abs() <= 1e-8 * emb.eigenvalues[0],
            "{:?}",
            emb.eigenvalues
        );
    }
}

#[test]
fn identical_leaf_patterns_give_no_axes() {
    let m = LeafMembership::from_codes(10, vec![0; 30], vec![1, 1, 1]).unwrap();
    let lr = lowrank_proximity(&m, 1, QuantMode::F32, 0).unwrap();
    let emb = mds_lowrank(&lr, &PowerIterConfig::default()).unwrap();
    assert_eq!(emb.dims(), 0);
    assert!(emb.notice.is_some());
}

#[test]
fn embedding_independent_of_worker_count() {
    let m = membership(70, 25, 15);
    let lr = lowrank_proximity(&m, 16, QuantMode::Nf4, 1).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| mds_lowrank(&lr, &PowerIterConfig::default()).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn correlation_of_embedding_with_itself_and_rotation() {
    let m = membership(40, 15, 16);
    let full = full_proximity(&m, None).unwrap();
    let emb = mds_full(&full, 3).unwrap();
    assert!((mds_correlation(&emb, &emb).unwrap() - 1.0).abs() < 1e-12);
    let (c, s) = (0.6f64, 0.8f64);
    let mut rotated = emb.clone();
    for row in &mut rotated.coordinates {
        let (x, y) = (row[0], row[1]);
        row[0] = c * x - s * y;
        row[1] = s * x + c * y;
    }
    assert!((mds_correlation(&emb, &rotated).unwrap() - 1.0).abs() < 1e-12);
}
