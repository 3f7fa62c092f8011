use crate::dataset::{ColumnKind, Dataset};
use crate::error::{Result, RfxError};
use crate::rng::{self, RfxRng};

use super::split::{best_garside_split, best_threshold_split, SplitPoint, MIN_GAIN};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitRule {
    /// Numeric: `x <= threshold` goes left.
    Threshold(f64),
    /// Categorical: level `k` goes left when bit `k` is set.
    Subset(u32),
}

impl SplitRule {
    #[inline]
    pub fn goes_left(&self, value: f64) -> bool {
        match *self {
            SplitRule::Threshold(t) => value <= t,
            SplitRule::Subset(mask) => (mask >> (value as u32)) & 1 == 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeStatus {
    Terminal,
    Internal {
        feature: usize,
        rule: SplitRule,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub status: NodeStatus,
    /// Majority class by weighted population; ties go to the lowest class.
    pub class: u32,
    /// Weighted class counts of the in-bag samples reaching this node.
    pub populations: Vec<u32>,
    /// Impurity decrease of this node's split; 0 for terminal nodes.
    pub gain: f64,
}

impl TreeNode {
    pub fn is_terminal(&self) -> bool {
        matches!(self.status, NodeStatus::Terminal)
    }

    pub fn weight(&self) -> u64 {
        self.populations.iter().map(|&c| c as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(RfxError::format("tree has no nodes"));
        }
        for (idx, node) in nodes.iter().enumerate() {
            if let NodeStatus::Internal {
                left, right, rule, ..
            } = node.status
            {
                if left <= idx || right <= idx || left >= nodes.len() || right >= nodes.len() {
                    return Err(RfxError::format(format!(
                        "node {idx} has invalid children ({left}, {right})"
                    )));
                }
                if let SplitRule::Subset(mask) = rule {
                    if mask & 1 == 0 {
                        return Err(RfxError::format(format!(
                            "node {idx} has a non-canonical subset mask"
                        )));
                    }
                }
            }
        }
        Ok(Tree { nodes })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_terminal()).count()
    }

    /// Terminal node reached by a sample whose feature `j` is `value(j)`.
    #[inline]
    pub fn descend(&self, value: impl Fn(usize) -> f64) -> usize {
        let mut idx = 0;
        loop {
            match self.nodes[idx].status {
                NodeStatus::Terminal => return idx,
                NodeStatus::Internal {
                    feature,
                    rule,
                    left,
                    right,
                } => {
                    idx = if rule.goes_left(value(feature)) {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    /// Terminal node index for a dense feature row.
    pub fn classify(&self, row: &[f64]) -> usize {
        self.descend(|j| row[j])
    }

    /// Terminal node index for training sample `i`.
    #[inline]
    pub fn classify_sample(&self, data: &Dataset, i: usize) -> usize {
        self.descend(|j| data.value(i, j))
    }

    pub fn predict(&self, row: &[f64]) -> u32 {
        self.nodes[self.classify(row)].class
    }
}

/// Knobs that shape a single tree.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GrowParams {
    pub mtry: usize,
    pub min_node_size: usize,
    pub max_nodes: usize,
}

/// Grows one tree on the in-bag samples given by `counts`.
///
/// Samples are weighted by their bootstrap multiplicity. A node is split
/// only when it is impure, its weighted size exceeds `min_node_size`, and
/// one of `mtry` randomly drawn features yields a positive impurity
/// decrease. Among equal gains the lower feature index wins.
pub(crate) fn grow_tree(
    data: &Dataset,
    counts: &[u32],
    params: GrowParams,
    tree_id: usize,
    rng: &mut RfxRng,
) -> Result<Tree> {
    let n_classes = data.n_classes();
    let p = data.n_features();
    let mut samples: Vec<usize> = (0..data.n_samples()).filter(|&i| counts[i] > 0).collect();
    if samples.is_empty() {
        return Err(RfxError::data("bootstrap sample is empty"));
    }
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut feature_pool: Vec<usize> = (0..p).collect();
    let mut points: Vec<SplitPoint> = Vec::with_capacity(samples.len());
    let mut scratch: Vec<usize> = Vec::with_capacity(samples.len());

    // (node index, start, end) ranges into `samples`.
    let mut pending: Vec<(usize, usize, usize)> = Vec::new();
    nodes.push(make_node(data, counts, &samples, n_classes));
    pending.push((0, 0, samples.len()));

    while let Some((idx, start, end)) = pending.pop() {
        let node = &nodes[idx];
        let weight = node.weight();
        let pure = node.populations.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || weight <= params.min_node_size as u64 {
            continue;
        }
        let members = &samples[start..end];

        // Partial Fisher–Yates over a fresh index buffer.
        feature_pool
            .iter_mut()
            .enumerate()
            .for_each(|(k, f)| *f = k);
        for k in 0..params.mtry {
            let pick = k + rng::index(rng, p - k);
            feature_pool.swap(k, pick);
        }

        let mut best: Option<(usize, SplitRule, f64)> = None;
        for &feature in &feature_pool[..params.mtry] {
            points.clear();
            points.extend(members.iter().map(|&i| SplitPoint {
                value: data.value(i, feature),
                class: data.labels()[i],
                weight: counts[i] as f64,
            }));
            let candidate = match &data.columns()[feature] {
                ColumnKind::Numeric => best_threshold_split(&mut points, n_classes)
                    .map(|s| (SplitRule::Threshold(s.threshold), s.gain)),
                ColumnKind::Categorical { levels } => {
                    best_garside_split(&points, levels.len(), n_classes, feature)?
                        .map(|s| (SplitRule::Subset(s.mask), s.gain))
                }
            };
            if let Some((rule, gain)) = candidate {
                let better = match best {
                    None => true,
                    Some((bf, _, bg)) => gain > bg || (gain == bg && feature < bf),
                };
                if better {
                    best = Some((feature, rule, gain));
                }
            }
        }
        let Some((feature, rule, gain)) = best else {
            continue;
        };
        if gain <= MIN_GAIN {
            continue;
        }
        if nodes.len() + 2 > params.max_nodes {
            return Err(RfxError::MaxNodesExceeded {
                tree: tree_id,
                max_nodes: params.max_nodes,
            });
        }

        // Stable partition of the node's range.
        scratch.clear();
        let mut n_left = 0;
        for k in start..end {
            let i = samples[k];
            if rule.goes_left(data.value(i, feature)) {
                samples[start + n_left] = i;
                n_left += 1;
            } else {
                scratch.push(i);
            }
        }
        samples[start + n_left..end].copy_from_slice(&scratch);
        let mid = start + n_left;

        let left = nodes.len();
        let right = left + 1;
        nodes.push(make_node(data, counts, &samples[start..mid], n_classes));
        nodes.push(make_node(data, counts, &samples[mid..end], n_classes));
        nodes[idx].status = NodeStatus::Internal {
            feature,
            rule,
            left,
            right,
        };
        nodes[idx].gain = gain;
        pending.push((right, mid, end));
        pending.push((left, start, mid));
    }
    Ok(Tree { nodes })
}

fn make_node(data: &Dataset, counts: &[u32], members: &[usize], n_classes: usize) -> TreeNode {
    let mut populations = vec![0u32; n_classes];
    for &i in members {
        populations[data.label(i)] += counts[i];
    }
    let class = majority(&populations);
    TreeNode {
        status: NodeStatus::Terminal,
        class,
        populations,
        gain: 0.0,
    }
}

/// Index of the largest count, lowest index on ties.
pub(crate) fn majority(counts: &[u32]) -> u32 {
    let mut best = 0;
    for (k, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = k;
        }
    }
    best as u32
}
