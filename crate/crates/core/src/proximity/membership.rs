use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Result, RfxError};
use crate::forest::Forest;

/// Terminal-node assignment of every sample in every tree.
///
/// Leaves of tree `b` are numbered `0..leaf_count(b)` in node-index order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafMembership {
    n: usize,
    /// Tree-major, `codes[b * n + i]`.
    codes: Vec<u32>,
    leaf_counts: Vec<u32>,
}

impl LeafMembership {
    pub fn from_codes(n: usize, codes: Vec<u32>, leaf_counts: Vec<u32>) -> Result<Self> {
        if n == 0 || codes.len() != n * leaf_counts.len() {
            return Err(RfxError::data("membership codes do not match n x trees"));
        }
        for (b, &count) in leaf_counts.iter().enumerate() {
            if let Some(&bad) = codes[b * n..(b + 1) * n].iter().find(|&&c| c >= count) {
                return Err(RfxError::data(format!(
                    "leaf code {bad} >= leaf count {count} in tree {b}"
                )));
            }
        }
        Ok(LeafMembership {
            n,
            codes,
            leaf_counts,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn n_trees(&self) -> usize {
        self.leaf_counts.len()
    }

    #[inline]
    pub fn code(&self, b: usize, i: usize) -> u32 {
        self.codes[b * self.n + i]
    }

    pub fn tree_codes(&self, b: usize) -> &[u32] {
        &self.codes[b * self.n..(b + 1) * self.n]
    }

    pub fn leaf_count(&self, b: usize) -> usize {
        self.leaf_counts[b] as usize
    }

    /// Total number of leaves over all trees: the column count of the
    /// one-hot membership matrix.
    pub fn total_leaves(&self) -> usize {
        self.leaf_counts.iter().map(|&c| c as usize).sum()
    }

    /// Column offset of tree `b`'s leaves in the one-hot matrix.
    pub(crate) fn leaf_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.leaf_counts.len());
        let mut acc = 0;
        for &c in &self.leaf_counts {
            offsets.push(acc);
            acc += c as usize;
        }
        offsets
    }

    /// Members of every leaf, ascending, as one CSR structure per forest.
    pub(crate) fn inverted(&self) -> InvertedLeaves {
        let offsets = self.leaf_offsets();
        let total = self.total_leaves();
        let mut starts = vec![0usize; total + 1];
        for b in 0..self.n_trees() {
            for &c in self.tree_codes(b) {
                starts[offsets[b] + c as usize + 1] += 1;
            }
        }
        for k in 0..total {
            starts[k + 1] += starts[k];
        }
        let mut fill = starts.clone();
        let mut members = vec![0u32; self.codes.len()];
        for b in 0..self.n_trees() {
            for (i, &c) in self.tree_codes(b).iter().enumerate() {
                let slot = &mut fill[offsets[b] + c as usize];
                members[*slot] = i as u32;
                *slot += 1;
            }
        }
        InvertedLeaves {
            offsets,
            starts,
            members,
        }
    }
}

pub(crate) struct InvertedLeaves {
    offsets: Vec<usize>,
    starts: Vec<usize>,
    members: Vec<u32>,
}

impl InvertedLeaves {
    #[inline]
    pub fn members(&self, b: usize, code: u32) -> &[u32] {
        let k = self.offsets[b] + code as usize;
        &self.members[self.starts[k]..self.starts[k + 1]]
    }
}

/// Co-membership counts of sample `i` with every `j > i`, written to
/// `row[j - i - 1]`.
pub(crate) fn upper_row_counts(
    membership: &LeafMembership,
    inverted: &InvertedLeaves,
    i: usize,
    row: &mut [u32],
) {
    row.iter_mut().for_each(|c| *c = 0);
    for b in 0..membership.n_trees() {
        let members = inverted.members(b, membership.code(b, i));
        let first = members.partition_point(|&j| j as usize <= i);
        for &j in &members[first..] {
            row[j as usize - i - 1] += 1;
        }
    }
}

/// Terminal node of every sample in every tree.
pub fn leaf_membership(forest: &Forest, data: &Dataset) -> Result<LeafMembership> {
    forest.check_dataset(data)?;
    let n = data.n_samples();
    let per_tree: Vec<(Vec<u32>, u32)> = forest
        .trees()
        .par_iter()
        .map(|tree| {
            let mut leaf_code = vec![u32::MAX; tree.node_count()];
            let mut next = 0u32;
            for (idx, node) in tree.nodes().iter().enumerate() {
                if node.is_terminal() {
                    leaf_code[idx] = next;
                    next += 1;
                }
            }
            let codes = (0..n)
                .map(|i| leaf_code[tree.classify_sample(data, i)])
                .collect();
            (codes, next)
        })
        .collect();
    let mut codes = Vec::with_capacity(n * per_tree.len());
    let mut leaf_counts = Vec::with_capacity(per_tree.len());
    for (c, count) in per_tree {
        codes.extend(c);
        leaf_counts.push(count);
    }
    Ok(LeafMembership {
        n,
        codes,
        leaf_counts,
    })
}
