use std::path::PathBuf;

use crate::codebook::FeasibilityReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("codeword length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid codeword parameters: {0}")]
    InvalidCodeword(String),

    #[error("enumeration of C({n}, {n_act}) = {count} codewords exceeds the cap of {cap}")]
    EnumerationCap {
        n: usize,
        n_act: usize,
        count: u128,
        cap: u128,
    },

    #[error("insufficient codewords, lower H_min (have {available}, need {needed})")]
    InsufficientCodewords { available: usize, needed: usize },

    #[error("infeasible coding scheme request: {report:?}")]
    Infeasible { report: FeasibilityReport },

    #[error("malformed scheme file: {0}")]
    SchemeFormat(String),

    #[error("shape mismatch in `{op}` (node {node}): {detail}")]
    Shape {
        op: &'static str,
        node: usize,
        detail: String,
    },

    #[error("backward from a non-scalar output of shape {0:?} requires an explicit seed")]
    NonScalarLoss(Vec<usize>),

    #[error("coding loss exponent must be even and positive, got {0}")]
    OddExponent(u32),

    #[error("class labels required in training mode (coded block input at node {0})")]
    MissingLabel(usize),

    #[error("drop mask for group {expected} requested but cached mask belongs to {found}")]
    MaskMismatch { expected: String, found: String },

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("no coding scheme for ratio {n_act}/{n}")]
    MissingScheme { n_act: usize, n: usize },

    #[error("coding scheme for ratio {n_act}/{n} has {found} codewords, network needs {expected}")]
    SchemeClassMismatch {
        n_act: usize,
        n: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch} (loss {loss}); last good checkpoint: {checkpoint:?}")]
    Diverged {
        epoch: usize,
        loss: f64,
        checkpoint: Option<PathBuf>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("analysis: {0}")]
    Analysis(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
