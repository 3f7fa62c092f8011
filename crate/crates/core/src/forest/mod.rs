//! Classification forest: bootstrap, tree growth, prediction and OOB estimates.

mod io;
pub mod split;
mod tree;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Result, RfxError};
use crate::rng::{self, RfxRng};

pub use split::{
    best_garside_split, best_threshold_split, gini, SplitPoint, SubsetSplit, ThresholdSplit,
};
pub use tree::{NodeStatus, SplitRule, Tree, TreeNode};

/// Upper bound on trees grown concurrently in one batch.
pub const MAX_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ntree: usize,
    /// Features tried per split; `None` means `floor(sqrt(p))`.
    pub mtry: Option<usize>,
    pub seed: u64,
    pub min_node_size: usize,
    /// Node cap per tree; `None` means `2n + 1`.
    pub max_nodes: Option<usize>,
    pub casewise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ntree: 500,
            mtry: None,
            seed: 1,
            min_node_size: 1,
            max_nodes: None,
            casewise: false,
        }
    }
}

impl TrainConfig {
    pub fn new(ntree: usize, seed: u64) -> Self {
        TrainConfig {
            ntree,
            seed,
            ..Default::default()
        }
    }

    /// Fills defaults for a dataset of shape `n x p` and validates.
    pub fn resolve(&self, n: usize, p: usize) -> Result<TrainConfig> {
        if self.ntree == 0 {
            return Err(RfxError::config("ntree must be at least 1"));
        }
        if self.min_node_size == 0 {
            return Err(RfxError::config("min_node_size must be at least 1"));
        }
        let mtry = self
            .mtry
            .unwrap_or_else(|| ((p as f64).sqrt().floor() as usize).max(1));
        if mtry == 0 || mtry > p {
            return Err(RfxError::config(format!(
                "mtry must be in 1..={p}, got {mtry}"
            )));
        }
        let max_nodes = self.max_nodes.unwrap_or(2 * n + 1);
        if max_nodes == 0 {
            return Err(RfxError::config("max_nodes must be at least 1"));
        }
        Ok(TrainConfig {
            mtry: Some(mtry),
            max_nodes: Some(max_nodes),
            ..self.clone()
        })
    }

    pub fn mtry_or_default(&self, p: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| ((p as f64).sqrt().floor() as usize).max(1))
    }
}

/// In-bag multiplicities for every (tree, sample) pair, tree-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootstrapRecord {
    n: usize,
    counts: Vec<u32>,
}

impl BootstrapRecord {
    pub fn from_counts(n: usize, counts: Vec<u32>) -> Result<Self> {
        if n == 0 || counts.len() % n != 0 {
            return Err(RfxError::format(
                "bootstrap counts do not tile the sample count",
            ));
        }
        Ok(BootstrapRecord { n, counts })
    }

    pub fn n_trees(&self) -> usize {
        self.counts.len() / self.n
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn tree(&self, b: usize) -> &[u32] {
        &self.counts[b * self.n..(b + 1) * self.n]
    }

    #[inline]
    pub fn count(&self, b: usize, i: usize) -> u32 {
        self.counts[b * self.n + i]
    }

    #[inline]
    pub fn is_oob(&self, b: usize, i: usize) -> bool {
        self.count(b, i) == 0
    }

    /// OOB sample indices of tree `b`, ascending.
    pub fn oob_samples(&self, b: usize) -> Vec<usize> {
        self.tree(b)
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Trees for which sample `i` is out of bag.
    pub fn oob_trees(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_trees()).filter(move |&b| self.is_oob(b, i))
    }

    /// Total in-bag multiplicity of sample `i` across the forest.
    pub fn total_count(&self, i: usize) -> u64 {
        (0..self.n_trees()).map(|b| self.count(b, i) as u64).sum()
    }

    pub(crate) fn raw(&self) -> &[u32] {
        &self.counts
    }
}

/// `n` uniform draws with replacement; returns per-sample multiplicities.
pub fn bootstrap_sample(n: usize, rng: &mut RfxRng) -> Vec<u32> {
    let mut counts = vec![0u32; n];
    for _ in 0..n {
        counts[rng::index(rng, n)] += 1;
    }
    counts
}

/// Grows a single tree with its own bootstrap, exactly as [`train`] would for
/// tree `tree_id`. Returns the tree and its in-bag counts.
pub fn grow_tree(data: &Dataset, config: &TrainConfig, tree_id: usize) -> Result<(Tree, Vec<u32>)> {
    let cfg = config.resolve(data.n_samples(), data.n_features())?;
    grow_resolved(data, &cfg, tree_id)
}

/// Grows a tree on caller-supplied in-bag counts using the stream for `tree_seed`.
pub fn grow_tree_with_counts(
    data: &Dataset,
    counts: &[u32],
    config: &TrainConfig,
    tree_seed: u64,
) -> Result<Tree> {
    let cfg = config.resolve(data.n_samples(), data.n_features())?;
    if counts.len() != data.n_samples() {
        return Err(RfxError::data(
            "count vector length differs from sample count",
        ));
    }
    let mut rng = rng::stream(tree_seed);
    tree::grow_tree(data, counts, grow_params(&cfg), 0, &mut rng)
}

fn grow_params(cfg: &TrainConfig) -> tree::GrowParams {
    tree::GrowParams {
        mtry: cfg.mtry.expect("resolved"),
        min_node_size: cfg.min_node_size,
        max_nodes: cfg.max_nodes.expect("resolved"),
    }
}

fn grow_resolved(data: &Dataset, cfg: &TrainConfig, tree_id: usize) -> Result<(Tree, Vec<u32>)> {
    let mut rng = rng::stream(rng::tree_seed(cfg.seed, tree_id));
    let counts = bootstrap_sample(data.n_samples(), &mut rng);
    let tree = tree::grow_tree(data, &counts, grow_params(cfg), tree_id, &mut rng)?;
    Ok((tree, counts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    config: TrainConfig,
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    trees: Vec<Tree>,
    bootstrap: BootstrapRecord,
    /// OOB vote tallies, `oob_votes[i * C + c]`.
    oob_votes: Vec<u32>,
}

/// Trains a forest. Trees are grown in parallel batches of at most
/// [`MAX_BATCH`] and merged in tree-index order, so the result does not
/// depend on the worker count.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<Forest> {
    let cfg = config.resolve(data.n_samples(), data.n_features())?;
    let n = data.n_samples();
    let ntree = cfg.ntree;
    let batch = ntree.min(MAX_BATCH);
    let mut trees = Vec::with_capacity(ntree);
    let mut counts = Vec::with_capacity(ntree * n);
    for first in (0..ntree).step_by(batch) {
        let last = (first + batch).min(ntree);
        let grown: Vec<Result<(Tree, Vec<u32>)>> = (first..last)
            .into_par_iter()
            .map(|b| grow_resolved(data, &cfg, b))
            .collect();
        for g in grown {
            let (tree, c) = g?;
            trees.push(tree);
            counts.extend(c);
        }
    }
    let bootstrap = BootstrapRecord { n, counts };
    let oob_votes = tally_oob_votes(data, &trees, &bootstrap);
    Ok(Forest {
        config: cfg,
        n_samples: n,
        n_features: data.n_features(),
        n_classes: data.n_classes(),
        trees,
        bootstrap,
        oob_votes,
    })
}

fn tally_oob_votes(data: &Dataset, trees: &[Tree], bootstrap: &BootstrapRecord) -> Vec<u32> {
    let c = data.n_classes();
    (0..data.n_samples())
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut votes = vec![0u32; c];
            for (b, tree) in trees.iter().enumerate() {
                if bootstrap.is_oob(b, i) {
                    let leaf = tree.classify_sample(data, i);
                    votes[tree.nodes()[leaf].class as usize] += 1;
                }
            }
            votes
        })
        .collect()
}

impl Forest {
    pub(crate) fn from_parts(
        config: TrainConfig,
        n_features: usize,
        n_classes: usize,
        trees: Vec<Tree>,
        bootstrap: BootstrapRecord,
        oob_votes: Vec<u32>,
    ) -> Result<Self> {
        let n_samples = bootstrap.n_samples();
        if trees.len() != bootstrap.n_trees() || trees.len() != config.ntree {
            return Err(RfxError::format(
                "tree count disagrees with bootstrap record",
            ));
        }
        if oob_votes.len() != n_samples * n_classes {
            return Err(RfxError::format("OOB vote table has the wrong shape"));
        }
        Ok(Forest {
            config,
            n_samples,
            n_features,
            n_classes,
            trees,
            bootstrap,
            oob_votes,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn bootstrap(&self) -> &BootstrapRecord {
        &self.bootstrap
    }

    pub fn oob_votes(&self, i: usize) -> &[u32] {
        &self.oob_votes[i * self.n_classes..(i + 1) * self.n_classes]
    }

    /// Checks that a dataset has the shape this forest was trained on.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.n_samples() != self.n_samples
            || data.n_features() != self.n_features
            || data.n_classes() != self.n_classes
        {
            return Err(RfxError::data(format!(
                "forest was trained on {} samples x {} features ({} classes); dataset has {} x {} ({} classes)",
                self.n_samples,
                self.n_features,
                self.n_classes,
                data.n_samples(),
                data.n_features(),
                data.n_classes()
            )));
        }
        Ok(())
    }

    /// Per-class vote counts over all trees.
    pub fn votes(&self, row: &[f64]) -> Vec<u32> {
        let mut votes = vec![0u32; self.n_classes];
        for t in &self.trees {
            votes[t.predict(row) as usize] += 1;
        }
        votes
    }

    /// Majority vote over all trees, lowest class on ties.
    pub fn predict(&self, row: &[f64]) -> u32 {
        tree::majority(&self.votes(row))
    }

    pub fn oob_report(&self, data: &Dataset) -> Result<OobReport> {
        self.check_dataset(data)?;
        let c = self.n_classes;
        let mut predictions = Vec::with_capacity(self.n_samples);
        let mut confusion = vec![vec![0u64; c]; c];
        let mut uncovered = Vec::new();
        let mut covered = 0usize;
        let mut wrong = 0usize;
        for i in 0..self.n_samples {
            let votes = self.oob_votes(i);
            if votes.iter().all(|&v| v == 0) {
                uncovered.push(i);
                predictions.push(None);
                continue;
            }
            let pred = tree::majority(votes);
            let truth = data.label(i);
            confusion[truth][pred as usize] += 1;
            covered += 1;
            if pred as usize != truth {
                wrong += 1;
            }
            predictions.push(Some(pred));
        }
        let error_rate = if covered == 0 {
            f64::NAN
        } else {
            wrong as f64 / covered as f64
        };
        let class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let total: u64 = row.iter().sum();
                if total == 0 {
                    f64::NAN
                } else {
                    row[k] as f64 / total as f64
                }
            })
            .collect();
        Ok(OobReport {
            predictions,
            error_rate,
            confusion,
            class_accuracy,
            uncovered,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OobReport {
    /// `None` for samples that were in bag for every tree.
    pub predictions: Vec<Option<u32>>,
    /// Misclassification rate over covered samples.
    pub error_rate: f64,
    /// Rows are true classes, columns predicted.
    pub confusion: Vec<Vec<u64>>,
    pub class_accuracy: Vec<f64>,
    pub uncovered: Vec<usize>,
}

impl OobReport {
    pub fn accuracy(&self) -> f64 {
        1.0 - self.error_rate
    }
}
