use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ScrcError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ScrcError {
    #[error("probabilities do not lie on the simplex (sum = {sum}, min entry = {min})")]
    NonSimplex { sum: f64, min: f64 },

    #[error("{what} = {value} is outside {bounds}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        bounds: &'static str,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("example has no label; calibration requires labelled data")]
    MissingLabel,

    #[error(
        "second stage infeasible: {selected} selected points give a counting budget of {budget} \
         (need a positive budget; m_min = {m_min})"
    )]
    Infeasible { selected: usize, budget: i64, m_min: usize },

    #[error(
        "calibration-only second stage infeasible: (n+1)*alpha*xi_lcb = {product:.4} < 1; \
         increase the calibration size, alpha, or delta"
    )]
    InfeasibleLowerBound { product: f64 },

    #[error("no feasible grid point: every candidate selected too few calibration points")]
    NoFeasibleGridPoint,

    #[error("random selection produced fewer than {needed} calibration points after {attempts} draws")]
    RandomSelectionTooSmall { needed: usize, attempts: usize },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("line {line}: expected {expected} fields, found {found}")]
    InconsistentWidth { line: u64, expected: usize, found: usize },

    #[error("line {line}: label {label} outside 1..={n_classes}")]
    LabelOutOfRange { line: u64, label: i64, n_classes: usize },

    #[error("split would leave the {0} partition empty")]
    EmptySplit(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl ScrcError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Self::Csv {
            path: path.into(),
            source,
        }
    }

    /// True for the errors that mean "the data cannot support the requested
    /// guarantee", as opposed to bad input.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            Self::Infeasible { .. }
                | Self::InfeasibleLowerBound { .. }
                | Self::NoFeasibleGridPoint
                | Self::RandomSelectionTooSmall { .. }
        )
    }
}
