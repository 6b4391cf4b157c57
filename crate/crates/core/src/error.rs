use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numerical,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 1,
            ErrorCategory::Data => 2,
            ErrorCategory::Numerical => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model specification: {0}")]
    Spec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing values unsupported (row {row}, column `{column}`)")]
    MissingValues { row: usize, column: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("factor model did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error(
        "mediator weight is collinear with the treatment weight ({detail}); \
         identification requires at least one treatment-covariate interaction in the mediator model"
    )]
    RankDeficient { detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Spec(_) | Error::InvalidArgument(_) => ErrorCategory::Usage,
            Error::Data(_)
            | Error::MissingValues { .. }
            | Error::Dimension(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorCategory::Data,
            Error::Singular(_)
            | Error::NotConverged { .. }
            | Error::RankDeficient { .. }
            | Error::Numerical(_) => ErrorCategory::Numerical,
        }
    }

    /// Short machine-readable tag, printed by the CLI next to the message.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Spec(_) => "spec",
            Error::InvalidArgument(_) => "argument",
            Error::Data(_) => "data",
            Error::MissingValues { .. } => "missing-values",
            Error::Dimension(_) => "dimension",
            Error::Singular(_) => "singular",
            Error::NotConverged { .. } => "not-converged",
            Error::RankDeficient { .. } => "rank-deficient",
            Error::Numerical(_) => "numerical",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
