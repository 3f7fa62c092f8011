//! Random forest classification with out-of-bag estimates, permutation and
//! local importance, proximity matrices in three storage layouts, and
//! classical MDS embeddings computed from either dense or low-rank
//! proximities.

pub mod dataset;
pub mod error;
pub mod forest;
pub mod importance;
pub mod mds;
pub mod proximity;
pub mod rng;

pub use dataset::{ColumnKind, Dataset, Schema};
pub use error::{Result, RfxError};
pub use forest::{train, Forest, OobReport, TrainConfig};
