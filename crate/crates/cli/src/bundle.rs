//! The JSON bundle consumed by the visualization.

use serde::{Deserialize, Serialize};

use rfx_core::forest::Forest;
use rfx_core::importance::ImportanceReport;
use rfx_core::mds::MdsEmbedding;
use rfx_core::proximity::OutlierScores;
use rfx_core::{ColumnKind, Dataset};

pub const SCHEMA_VERSION: &str = "1.0.0";

/// Per-tree votes are exported only up to this many trees.
pub const PER_TREE_VOTE_LIMIT: usize = 500;

/// Embedding width in the bundle; missing axes are zero-filled.
pub const BUNDLE_DIMS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VizBundle {
    pub schema_version: String,
    pub metadata: Metadata,
    pub features: Features,
    pub labels: Vec<u32>,
    pub class_names: Vec<String>,
    pub oob: OobVotes,
    pub importance: Importance,
    pub mds: Embedding,
    pub outliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub trees: usize,
    pub seed: u64,
    pub backend: String,
    pub casewise: bool,
    pub oob_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub names: Vec<String>,
    /// `numeric` or `categorical`.
    pub kinds: Vec<String>,
    /// Level names for categorical columns, `null` otherwise.
    pub levels: Vec<Option<Vec<String>>>,
    /// One row of raw values per sample; categorical values are level codes.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OobVotes {
    /// `null` for samples that were never out of bag.
    pub predictions: Vec<Option<u32>>,
    /// Per-class fractions of OOB votes; all zero for uncovered samples.
    pub vote_fractions: Vec<Vec<f64>>,
    /// Each tree's class for each sample, `null` where the sample was in
    /// bag. Present only for forests of at most [`PER_TREE_VOTE_LIMIT`] trees.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_tree: Option<Vec<Vec<Option<u32>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub gini: Vec<f64>,
    pub permutation: Vec<f64>,
    pub permutation_sd: Vec<f64>,
    pub local: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub coordinates: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
}

pub struct BundleParts<'a> {
    pub data: &'a Dataset,
    pub forest: &'a Forest,
    pub backend: String,
    pub importance: &'a ImportanceReport,
    pub embedding: &'a MdsEmbedding,
    pub outliers: &'a OutlierScores,
}

impl VizBundle {
    pub fn build(parts: BundleParts<'_>) -> rfx_core::Result<VizBundle> {
        let BundleParts {
            data,
            forest,
            backend,
            importance,
            embedding,
            outliers,
        } = parts;
        let n = data.n_samples();
        let c = data.n_classes();
        let oob = forest.oob_report(data)?;

        let vote_fractions = (0..n)
            .map(|i| {
                let votes = forest.oob_votes(i);
                let total: u32 = votes.iter().sum();
                if total == 0 {
                    vec![0.0; c]
                } else {
                    votes.iter().map(|&v| v as f64 / total as f64).collect()
                }
            })
            .collect();
        let per_tree = (forest.n_trees() <= PER_TREE_VOTE_LIMIT).then(|| {
            (0..n)
                .map(|i| {
                    let row = data.row(i);
                    forest
                        .trees()
                        .iter()
                        .enumerate()
                        .map(|(b, t)| forest.bootstrap().is_oob(b, i).then(|| t.predict(&row)))
                        .collect()
                })
                .collect()
        });

        let coordinates = embedding
            .coordinates
            .iter()
            .map(|row| {
                (0..BUNDLE_DIMS)
                    .map(|k| row.get(k).copied().unwrap_or(0.0))
                    .collect()
            })
            .collect();

        Ok(VizBundle {
            schema_version: SCHEMA_VERSION.into(),
            metadata: Metadata {
                n_samples: n,
                n_features: data.n_features(),
                n_classes: c,
                trees: forest.n_trees(),
                seed: forest.config().seed,
                backend,
                casewise: importance.casewise,
                oob_error: oob.error_rate,
            },
            features: Features {
                names: data.feature_names().to_vec(),
                kinds: data
                    .columns()
                    .iter()
                    .map(|k| {
                        if k.is_categorical() {
                            "categorical"
                        } else {
                            "numeric"
                        }
                        .to_string()
                    })
                    .collect(),
                levels: data
                    .columns()
                    .iter()
                    .map(|k| match k {
                        ColumnKind::Categorical { levels } => Some(levels.clone()),
                        _ => None,
                    })
                    .collect(),
                values: (0..n).map(|i| data.row(i)).collect(),
            },
            labels: data.labels().to_vec(),
            class_names: data.class_names().to_vec(),
            oob: OobVotes {
                predictions: oob.predictions,
                vote_fractions,
                per_tree,
            },
            importance: Importance {
                gini: importance.overall_gini.clone(),
                permutation: importance.overall_perm.clone(),
                permutation_sd: importance.overall_perm_sd.clone(),
                local: importance.local.to_rows(),
            },
            mds: Embedding {
                coordinates,
                eigenvalues: embedding.eigenvalues.clone(),
                notice: embedding.notice.clone(),
            },
            outliers: outliers.scores.clone(),
        })
    }

    /// Checks the invariants the schema cannot express: consistent lengths
    /// and vote fractions summing to one for covered samples.
    pub fn check(&self) -> Result<(), String> {
        let m = &self.metadata;
        let (n, p, c) = (m.n_samples, m.n_features, m.n_classes);
        let rows_ok = |rows: &[Vec<f64>], width: usize| {
            rows.len() == n && rows.iter().all(|r| r.len() == width)
        };
        if self.features.names.len() != p
            || self.features.kinds.len() != p
            || self.features.levels.len() != p
        {
            return Err("feature metadata length differs from n_features".into());
        }
        if !rows_ok(&self.features.values, p) {
            return Err("feature values are not n x p".into());
        }
        if self.labels.len() != n || self.class_names.len() != c {
            return Err("labels or class names have the wrong length".into());
        }
        if self.oob.predictions.len() != n || !rows_ok(&self.oob.vote_fractions, c) {
            return Err("OOB arrays are not n x C".into());
        }
        for (i, (pred, fr)) in self
            .oob
            .predictions
            .iter()
            .zip(&self.oob.vote_fractions)
            .enumerate()
        {
            let sum: f64 = fr.iter().sum();
            if pred.is_some() && (sum - 1.0).abs() > 1e-9 {
                return Err(format!("vote fractions of sample {i} sum to {sum}"));
            }
        }
        if let Some(per_tree) = &self.oob.per_tree {
            if per_tree.len() != n || per_tree.iter().any(|r| r.len() != m.trees) {
                return Err("per-tree votes are not n x B".into());
            }
        }
        if !rows_ok(&self.importance.local, p)
            || self.importance.gini.len() != p
            || self.importance.permutation.len() != p
        {
            return Err("importance arrays have the wrong shape".into());
        }
        if !rows_ok(&self.mds.coordinates, BUNDLE_DIMS) {
            return Err("mds coordinates are not n x 3".into());
        }
        if self.outliers.len() != n {
            return Err("outlier scores have the wrong length".into());
        }
        Ok(())
    }
}
