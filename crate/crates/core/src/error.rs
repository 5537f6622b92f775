use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::ItemId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("item {item}: expected dimension {expected}, found {found}")]
    Dimension {
        item: ItemId,
        expected: usize,
        found: usize,
    },

    #[error("no representation for item {0}")]
    MissingItem(ItemId),

    #[error("zero-norm vector for {0}")]
    ZeroNorm(String),

    #[error("degenerate covariance: rank {rank} < requested dimension {requested}; try a smaller target dimension")]
    DegenerateCovariance { rank: usize, requested: usize },

    #[error("disambiguation level overflow: {count} items share SID {sid:?} but capacity is {capacity}")]
    DedupOverflow {
        sid: Vec<u32>,
        count: usize,
        capacity: usize,
    },

    #[error("empty evaluation set: {0}")]
    EmptyEvaluation(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
