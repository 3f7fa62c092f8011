use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RfxError>;

#[derive(Debug, Error)]
pub enum RfxError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Bad input data: missing values, malformed tokens, schema mismatches.
    #[error("data error: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("gini impurity of an empty node is undefined")]
    EmptyNode,

    #[error("categorical feature {feature} has {levels} levels; exhaustive partition search supports at most 32")]
    TooManyLevels { feature: usize, levels: usize },

    #[error("tree {tree} exceeded the node limit of {max_nodes}")]
    MaxNodesExceeded { tree: usize, max_nodes: usize },

    /// A dense proximity backend would not fit the configured memory budget.
    #[error(
        "{backend} proximity needs {required} bytes but the budget is {budget} bytes; {suggestion}"
    )]
    BudgetExceeded {
        backend: &'static str,
        required: u64,
        budget: u64,
        suggestion: String,
    },

    #[error("index ({i}, {j}) out of range for n = {n}")]
    IndexOutOfRange { i: usize, j: usize, n: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{0}")]
    Degenerate(String),
}

impl RfxError {
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        RfxError::Data(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        RfxError::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        RfxError::Format(msg.into())
    }
}
