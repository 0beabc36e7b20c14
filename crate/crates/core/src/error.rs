use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not unitary: max |U^dagger U - I| = {deviation:.3e} (tolerance {tolerance:.1e})")]
    NotUnitary { deviation: f64, tolerance: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed mesh layout: {0}")]
    Layout(String),

    #[error("target phase {target:.6} rad unreachable; achievable range is [{min:.6}, {max:.6}] rad")]
    Unreachable { target: f64, min: f64, max: f64 },

    #[error("matrix is singular or ill-conditioned (condition number {condition:.3e})")]
    Singular { condition: f64 },

    #[error("fit did not converge: {reason} (residual norm {residual:.3e})")]
    FitDivergence { reason: String, residual: f64 },

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NoConvergence {
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("rank deficient system: rank {rank} of {unknowns} unknowns ({gauge} gauge freedoms allowed)")]
    RankDeficient {
        rank: usize,
        unknowns: usize,
        gauge: usize,
    },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("infeasible target: best achieved fidelity {best_fidelity:.6}")]
    Infeasible { best_fidelity: f64 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("line {line}: {message}")]
    MalformedRow { line: usize, message: String },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse grouping used for process exit codes and foreign error codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    /// The caller asked for something malformed.
    Usage,
    /// Input data or files were unusable.
    Data,
    /// A numerical procedure failed to reach its target.
    Convergence,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidArgument(_) | Error::Layout(_) => ErrorCategory::Usage,
            Error::FitDivergence { .. }
            | Error::NoConvergence { .. }
            | Error::RankDeficient { .. }
            | Error::Calibration(_)
            | Error::Infeasible { .. }
            | Error::Singular { .. } => ErrorCategory::Convergence,
            Error::NotUnitary { .. }
            | Error::Dimension(_)
            | Error::Unreachable { .. }
            | Error::Dataset(_)
            | Error::MalformedRow { .. }
            | Error::SchemaVersion { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorCategory::Data,
        }
    }
}
