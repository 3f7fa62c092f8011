//! Overall, permutation and local (per-sample) variable importance.
//!
//! Permutation and local importance come out of one pass over the forest:
//! for every tree `b` and feature `j`, the values of `j` are shuffled among
//! the tree's OOB samples (stream seed `iseed + B + b*p + j`) and each OOB
//! sample's 0–1 loss is compared before and after. Tree-level sums give
//! permutation importance; per-sample sums, scaled by `B` or by the
//! sample's OOB tree count, give the local matrix.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::Result;
use crate::forest::{Forest, NodeStatus};
use crate::rng;

/// Trees per accumulation chunk. Chunks are merged in order, so sums do not
/// depend on the worker count.
const TREE_CHUNK: usize = 32;

/// Per-(tree, sample) weight applied in casewise mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseWeighting {
    /// `n * c_i / Σ c`, where `c_i` is sample `i`'s total in-bag multiplicity
    /// across the forest. Averages to 1 over samples.
    ForestFrequency,
    /// Mean bootstrap multiplicity of the in-bag samples sharing the terminal
    /// node the OOB sample lands in (node weight over distinct members).
    #[default]
    TerminalNode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GiniImportance {
    /// Normalized to sum to 1.
    pub values: Vec<f64>,
    /// True when no split reduced impurity and `values` is uniform.
    pub degenerate: bool,
}

/// Mean weighted impurity decrease per feature, normalized to sum to 1.
///
/// Each split contributes `(w_node / w_root) * ΔI`.
pub fn gini_importance(forest: &Forest) -> GiniImportance {
    let p = forest.n_features();
    let mut totals = vec![0.0; p];
    for tree in forest.trees() {
        let root = tree.nodes()[0].weight() as f64;
        for node in tree.nodes() {
            if let NodeStatus::Internal { feature, .. } = node.status {
                totals[feature] += node.weight() as f64 / root * node.gain;
            }
        }
    }
    let b = forest.n_trees() as f64;
    totals.iter_mut().for_each(|t| *t /= b);
    let sum: f64 = totals.iter().sum();
    if sum > 0.0 {
        GiniImportance {
            values: totals.iter().map(|t| t / sum).collect(),
            degenerate: false,
        }
    } else {
        GiniImportance {
            values: vec![1.0 / p as f64; p],
            degenerate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PermutationImportance {
    pub mean: Vec<f64>,
    /// Standard deviation across trees (n−1 denominator) over trees with at
    /// least two OOB samples.
    pub sd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalImportance {
    n_features: usize,
    /// Row-major `n x p`.
    values: Vec<f64>,
    /// Samples never out of bag; their rows are zero.
    pub uncovered: Vec<usize>,
}

impl LocalImportance {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_features + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn n_samples(&self) -> usize {
        self.values.len() / self.n_features
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.n_samples() as f64;
        (0..self.n_features)
            .map(|j| (0..self.n_samples()).map(|i| self.get(i, j)).sum::<f64>() / n)
            .collect()
    }

    /// Rows as nested vectors, for export.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_samples())
            .map(|i| self.row(i).to_vec())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceReport {
    pub feature_names: Vec<String>,
    pub overall_gini: Vec<f64>,
    pub gini_degenerate: bool,
    pub overall_perm: Vec<f64>,
    pub overall_perm_sd: Vec<f64>,
    pub local: LocalImportance,
    pub casewise: bool,
    pub weighting: Option<CaseWeighting>,
    pub local_scale: LocalScale,
    pub trees_used: usize,
}

/// Denominator of a sample's local importance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalScale {
    /// Sum over the sample's OOB trees divided by `B`. Column means then
    /// equal the overall permutation importance divided by `n`.
    #[default]
    AllTrees,
    /// Sum over the sample's OOB trees divided by their count.
    OobTrees,
}

/// Options for the permutation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ImportanceOptions {
    pub casewise: bool,
    pub weighting: CaseWeighting,
    pub local_scale: LocalScale,
}

impl ImportanceOptions {
    pub fn casewise(casewise: bool) -> Self {
        ImportanceOptions {
            casewise,
            ..Default::default()
        }
    }
}

/// Source of OOB permutations: fills `perm` (initialized to the identity)
/// for tree `b` and feature `j`.
pub trait Permuter: Sync {
    fn permute(&self, tree: usize, feature: usize, perm: &mut [usize]);
}

/// The seeded permutation used by default.
#[derive(Debug, Clone, Copy)]
pub struct SeededPermuter {
    seed: u64,
    ntree: usize,
    n_features: usize,
}

impl SeededPermuter {
    pub fn for_forest(forest: &Forest) -> Self {
        SeededPermuter {
            seed: forest.config().seed,
            ntree: forest.n_trees(),
            n_features: forest.n_features(),
        }
    }
}

impl Permuter for SeededPermuter {
    fn permute(&self, tree: usize, feature: usize, perm: &mut [usize]) {
        let mut r = rng::stream(rng::permutation_seed(
            self.seed,
            self.ntree,
            tree,
            self.n_features,
            feature,
        ));
        rng::shuffle(&mut r, perm);
    }
}

/// Leaves every OOB sample in place.
#[derive(Debug, Clone, Copy)]
pub struct IdentityPermuter;

impl Permuter for IdentityPermuter {
    fn permute(&self, _tree: usize, _feature: usize, _perm: &mut [usize]) {}
}

struct PassOutput {
    /// `B x p` per-tree scores.
    per_tree: Vec<f64>,
    valid: Vec<bool>,
    local: LocalImportance,
}

/// Casewise weight of OOB sample `i` in tree `b`, given the terminal node it
/// reaches. `leaf_density[node]` is the mean in-bag multiplicity of that node.
fn case_weight(
    rule: CaseWeighting,
    forest_frequency: &[f64],
    leaf_density: &[f64],
    sample: usize,
    leaf: usize,
) -> f64 {
    match rule {
        CaseWeighting::ForestFrequency => forest_frequency[sample],
        CaseWeighting::TerminalNode => leaf_density[leaf],
    }
}

/// `n * c_i / Σ c`; all ones when every sample has the same total.
fn forest_frequencies(forest: &Forest) -> Vec<f64> {
    let n = forest.n_samples();
    let totals: Vec<u64> = (0..n).map(|i| forest.bootstrap().total_count(i)).collect();
    let sum: u64 = totals.iter().sum();
    if sum == 0 || totals.iter().all(|&t| t == totals[0]) {
        return vec![1.0; n];
    }
    totals
        .iter()
        .map(|&t| n as f64 * t as f64 / sum as f64)
        .collect()
}

fn permutation_pass<P: Permuter>(
    forest: &Forest,
    data: &Dataset,
    opts: ImportanceOptions,
    permuter: &P,
) -> Result<PassOutput> {
    forest.check_dataset(data)?;
    let n = forest.n_samples();
    let p = forest.n_features();
    let ntree = forest.n_trees();
    let frequencies = if opts.casewise {
        forest_frequencies(forest)
    } else {
        Vec::new()
    };

    let chunks: Vec<(Vec<f64>, Vec<bool>, Vec<f64>)> = (0..ntree.div_ceil(TREE_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let first = chunk * TREE_CHUNK;
            let last = (first + TREE_CHUNK).min(ntree);
            let mut per_tree = vec![0.0; (last - first) * p];
            let mut valid = vec![false; last - first];
            let mut local = vec![0.0; n * p];
            let mut perm = Vec::new();
            for b in first..last {
                let tree = &forest.trees()[b];
                let counts = forest.bootstrap().tree(b);
                let oob = forest.bootstrap().oob_samples(b);
                valid[b - first] = oob.len() >= 2;
                if oob.is_empty() {
                    continue;
                }
                let mut used = vec![false; p];
                for node in tree.nodes() {
                    if let NodeStatus::Internal { feature, .. } = node.status {
                        used[feature] = true;
                    }
                }
                let leaf_density = if opts.casewise && opts.weighting == CaseWeighting::TerminalNode
                {
                    let mut distinct = vec![0u32; tree.node_count()];
                    for (i, &c) in counts.iter().enumerate() {
                        if c > 0 {
                            distinct[tree.classify_sample(data, i)] += 1;
                        }
                    }
                    tree.nodes()
                        .iter()
                        .zip(&distinct)
                        .map(|(node, &d)| {
                            if d == 0 {
                                1.0
                            } else {
                                node.weight() as f64 / d as f64
                            }
                        })
                        .collect()
                } else {
                    Vec::new()
                };

                let mut orig_loss = Vec::with_capacity(oob.len());
                let mut weights = Vec::with_capacity(oob.len());
                for &i in &oob {
                    let leaf = tree.classify_sample(data, i);
                    orig_loss.push(if tree.nodes()[leaf].class as usize != data.label(i) {
                        1.0
                    } else {
                        0.0
                    });
                    weights.push(if opts.casewise {
                        case_weight(opts.weighting, &frequencies, &leaf_density, i, leaf)
                    } else {
                        1.0
                    });
                }

                for j in 0..p {
                    if !used[j] {
                        continue;
                    }
                    perm.clear();
                    perm.extend(0..oob.len());
                    permuter.permute(b, j, &mut perm);
                    let mut score = 0.0;
                    for (k, &i) in oob.iter().enumerate() {
                        let donor = oob[perm[k]];
                        let swapped = data.value(donor, j);
                        let leaf =
                            tree.descend(|f| if f == j { swapped } else { data.value(i, f) });
                        let loss = if tree.nodes()[leaf].class as usize != data.label(i) {
                            1.0
                        } else {
                            0.0
                        };
                        let d = weights[k] * (loss - orig_loss[k]);
                        score += d;
                        local[i * p + j] += d;
                    }
                    per_tree[(b - first) * p + j] = score;
                }
            }
            (per_tree, valid, local)
        })
        .collect();

    let mut per_tree = Vec::with_capacity(ntree * p);
    let mut valid = Vec::with_capacity(ntree);
    let mut local_sum = vec![0.0; n * p];
    for (t, v, l) in chunks {
        per_tree.extend(t);
        valid.extend(v);
        local_sum.iter_mut().zip(&l).for_each(|(a, b)| *a += b);
    }

    let mut uncovered = Vec::new();
    for i in 0..n {
        let oob_trees = forest.bootstrap().oob_trees(i).count();
        let row = &mut local_sum[i * p..(i + 1) * p];
        if oob_trees == 0 {
            uncovered.push(i);
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            let denom = match opts.local_scale {
                LocalScale::AllTrees => ntree,
                LocalScale::OobTrees => oob_trees,
            };
            row.iter_mut().for_each(|v| *v /= denom as f64);
        }
    }
    Ok(PassOutput {
        per_tree,
        valid,
        local: LocalImportance {
            n_features: p,
            values: local_sum,
            uncovered,
        },
    })
}

fn summarize(pass: &PassOutput, ntree: usize, p: usize) -> PermutationImportance {
    let mut mean = vec![0.0; p];
    let mut sd = vec![0.0; p];
    for j in 0..p {
        let total: f64 = (0..ntree).map(|b| pass.per_tree[b * p + j]).sum();
        mean[j] = total / ntree as f64;
        let scores: Vec<f64> = (0..ntree)
            .filter(|&b| pass.valid[b])
            .map(|b| pass.per_tree[b * p + j])
            .collect();
        if scores.len() >= 2 {
            let m = scores.iter().sum::<f64>() / scores.len() as f64;
            let var =
                scores.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / (scores.len() - 1) as f64;
            sd[j] = var.sqrt();
        }
    }
    PermutationImportance { mean, sd }
}

/// Mean and sd across trees of `correct − correct_permuted` on each tree's
/// OOB samples.
pub fn permutation_importance(
    forest: &Forest,
    data: &Dataset,
    opts: ImportanceOptions,
) -> Result<PermutationImportance> {
    permutation_importance_with(forest, data, opts, &SeededPermuter::for_forest(forest))
}

pub fn permutation_importance_with<P: Permuter>(
    forest: &Forest,
    data: &Dataset,
    opts: ImportanceOptions,
    permuter: &P,
) -> Result<PermutationImportance> {
    let pass = permutation_pass(forest, data, opts, permuter)?;
    Ok(summarize(&pass, forest.n_trees(), forest.n_features()))
}

/// Local importance `V_ij`: the mean over trees where `i` is OOB of the
/// increase in 0–1 loss when feature `j` is permuted.
pub fn local_importance(
    forest: &Forest,
    data: &Dataset,
    opts: ImportanceOptions,
) -> Result<LocalImportance> {
    Ok(permutation_pass(forest, data, opts, &SeededPermuter::for_forest(forest))?.local)
}

/// Casewise overall importance per sample. Shares its definition with the
/// casewise local importance, so this is the same matrix.
pub fn case_importance(forest: &Forest, data: &Dataset) -> Result<LocalImportance> {
    local_importance(forest, data, ImportanceOptions::casewise(true))
}

/// All importance measures from one permutation pass.
pub fn importance_report(
    forest: &Forest,
    data: &Dataset,
    opts: ImportanceOptions,
) -> Result<ImportanceReport> {
    let pass = permutation_pass(forest, data, opts, &SeededPermuter::for_forest(forest))?;
    let perm = summarize(&pass, forest.n_trees(), forest.n_features());
    let gini = gini_importance(forest);
    Ok(ImportanceReport {
        feature_names: data.feature_names().to_vec(),
        overall_gini: gini.values,
        gini_degenerate: gini.degenerate,
        overall_perm: perm.mean,
        overall_perm_sd: perm.sd,
        local: pass.local,
        casewise: opts.casewise,
        weighting: opts.casewise.then_some(opts.weighting),
        local_scale: opts.local_scale,
        trees_used: forest.n_trees(),
    })
}

impl ImportanceReport {
    /// `feature,gini,perm_mean,perm_sd` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,gini,perm_mean,perm_sd\n");
        for (j, name) in self.feature_names.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(name),
                self.overall_gini[j],
                self.overall_perm[j],
                self.overall_perm_sd[j]
            ));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "features": self.feature_names,
            "overall_gini": self.overall_gini,
            "gini_degenerate": self.gini_degenerate,
            "overall_perm": self.overall_perm,
            "overall_perm_sd": self.overall_perm_sd,
            "casewise": self.casewise,
            "weighting": self.weighting,
            "local_scale": self.local_scale,
            "trees_used": self.trees_used,
            "local": self.local.to_rows(),
            "uncovered": self.local.uncovered,
        })
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ColumnKind;
    use crate::forest::{train, BootstrapRecord, SplitRule, TrainConfig, Tree, TreeNode};

    fn stump(feature: usize, gain: f64) -> Tree {
        let leaf = |class| TreeNode {
            status: NodeStatus::Terminal,
            class,
            populations: vec![2, 2],
            gain: 0.0,
        };
        Tree::from_nodes(vec![
            TreeNode {
                status: NodeStatus::Internal {
                    feature,
                    rule: SplitRule::Threshold(0.5),
                    left: 1,
                    right: 2,
                },
                class: 0,
                populations: vec![4, 4],
                gain,
            },
            leaf(0),
            leaf(1),
        ])
        .unwrap()
    }

    fn forest_of(trees: Vec<Tree>, n: usize, p: usize) -> Forest {
        let b = trees.len();
        Forest::from_parts(
            TrainConfig {
                mtry: Some(1),
                max_nodes: Some(2 * n + 1),
                ..TrainConfig::new(b, 1)
            },
            p,
            2,
            trees,
            BootstrapRecord::from_counts(n, vec![1; n * b]).unwrap(),
            vec![0; n * 2],
        )
        .unwrap()
    }

    #[test]
    fn stumps_on_one_feature_take_all_mass() {
        let f = forest_of(vec![stump(3, 0.5), stump(3, 0.2)], 8, 5);
        let g = gini_importance(&f);
        assert_eq!(g.values, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(!g.degenerate);
    }

    #[test]
    fn duplicated_trees_do_not_change_gini_importance() {
        let one = forest_of(vec![stump(0, 0.3)], 8, 2);
        let two = forest_of(vec![stump(0, 0.3), stump(0, 0.3)], 8, 2);
        assert_eq!(gini_importance(&one), gini_importance(&two));
        let mixed1 = forest_of(vec![stump(0, 0.3), stump(1, 0.1)], 8, 2);
        let mixed2 = forest_of(
            vec![stump(0, 0.3), stump(1, 0.1), stump(0, 0.3), stump(1, 0.1)],
            8,
            2,
        );
        let (a, b) = (
            gini_importance(&mixed1).values,
            gini_importance(&mixed2).values,
        );
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn stumpless_forest_is_uniform_and_flagged() {
        let leaf = Tree::from_nodes(vec![TreeNode {
            status: NodeStatus::Terminal,
            class: 0,
            populations: vec![3, 1],
            gain: 0.0,
        }])
        .unwrap();
        let g = gini_importance(&forest_of(vec![leaf], 4, 4));
        assert!(g.degenerate);
        assert_eq!(g.values, vec![0.25; 4]);
    }

    fn toy_data() -> Dataset {
        let n = 60;
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let noise: Vec<f64> = (0..n).map(|i| ((i * 13) % 7) as f64).collect();
        let labels: Vec<u32> = (0..n).map(|i| u32::from(i >= 30)).collect();
        let mut values = x;
        values.extend(noise);
        Dataset::new(
            vec!["x".into(), "noise".into()],
            vec![ColumnKind::Numeric, ColumnKind::Numeric],
            values,
            labels,
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn identity_permutation_gives_zero() {
        let data = toy_data();
        let forest = train(&data, &TrainConfig::new(20, 3)).unwrap();
        for casewise in [false, true] {
            let imp = permutation_importance_with(
                &forest,
                &data,
                ImportanceOptions::casewise(casewise),
                &IdentityPermuter,
            )
            .unwrap();
            assert!(imp.mean.iter().all(|&m| m == 0.0));
            assert!(imp.sd.iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn unsplit_feature_scores_exactly_zero() {
        let data = toy_data();
        // mtry = 2 always sees x, which separates perfectly at the root.
        let forest = train(
            &data,
            &TrainConfig {
                mtry: Some(2),
                ..TrainConfig::new(15, 8)
            },
        )
        .unwrap();
        let pass = permutation_pass(
            &forest,
            &data,
            ImportanceOptions::default(),
            &SeededPermuter::for_forest(&forest),
        )
        .unwrap();
        for b in 0..15 {
            assert_eq!(pass.per_tree[b * 2 + 1], 0.0);
        }
        assert!(pass.local.column_means()[1] == 0.0);
        assert!(pass.local.column_means()[0] > 0.0);
    }

    #[test]
    fn uniform_counts_make_casewise_equal_plain() {
        let data = toy_data();
        let trained = train(&data, &TrainConfig::new(9, 5)).unwrap();
        // Every in-bag count is 1 and every sample is OOB in exactly 3 of the
        // 9 trees, so both weighting rules reduce to 1.
        let n = data.n_samples();
        let mut counts = Vec::new();
        let mut trees = Vec::new();
        for b in 0..9 {
            let c: Vec<u32> = (0..n).map(|i| u32::from((i + b) % 3 != 0)).collect();
            trees.push(
                crate::forest::grow_tree_with_counts(&data, &c, trained.config(), b as u64)
                    .unwrap(),
            );
            counts.extend(c);
        }
        let forest = Forest::from_parts(
            trained.config().clone(),
            2,
            2,
            trees,
            BootstrapRecord::from_counts(n, counts).unwrap(),
            vec![0; n * 2],
        )
        .unwrap();
        let plain = local_importance(&forest, &data, ImportanceOptions::casewise(false)).unwrap();
        for weighting in [CaseWeighting::ForestFrequency, CaseWeighting::TerminalNode] {
            let cw = local_importance(
                &forest,
                &data,
                ImportanceOptions {
                    casewise: true,
                    weighting,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(plain, cw, "{weighting:?}");
        }
    }

    #[test]
    fn uncovered_samples_have_zero_rows() {
        let data = toy_data();
        let forest = train(&data, &TrainConfig::new(1, 2)).unwrap();
        let local = local_importance(&forest, &data, ImportanceOptions::default()).unwrap();
        assert!(!local.uncovered.is_empty());
        for &i in &local.uncovered {
            assert!(local.row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn csv_export_shape() {
        let data = toy_data();
        let forest = train(&data, &TrainConfig::new(5, 2)).unwrap();
        let report = importance_report(&forest, &data, ImportanceOptions::default()).unwrap();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("feature,gini,perm_mean,perm_sd\nx,"));
        assert_eq!(report.to_json()["local"].as_array().unwrap().len(), 60);
    }
}
