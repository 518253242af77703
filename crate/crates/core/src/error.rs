use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular design{}: pivot {pivot} of {size} fell below tolerance", block_label(.block))]
    SingularDesign {
        block: Option<usize>,
        pivot: usize,
        size: usize,
    },

    #[error("insufficient sample size{}: {available} rows available, {required} required", block_label(.block))]
    InsufficientSamples {
        block: Option<usize>,
        available: usize,
        required: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate residual variance for constituent {block}: sigma^2 = 0 while other residuals are nonzero")]
    DegenerateVariance { block: usize },

    #[error("coordinate descent did not converge after {iterations} sweeps (max change {max_change:e})")]
    Convergence { iterations: usize, max_change: f64 },

    #[error("degenerate orthogonalization in fold {fold}: |denominator| = {denominator:e}")]
    DegenerateOrthogonalization { fold: usize, denominator: f64 },

    #[error("internal consistency: {0}")]
    InternalConsistency(String),

    #[error("infeasible truncation: pilot acceptance rate {acceptance:e} is below 1e-3")]
    InfeasibleTruncation { acceptance: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("too many failed replicates: {failed} of {total}")]
    ReplicateFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn block_label(block: &Option<usize>) -> String {
    match block {
        Some(b) => format!(" in calibration block {b}"),
        None => String::new(),
    }
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InfeasibleTruncation { .. } => 2,
            Error::Data(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::DimensionMismatch(_)
            | Error::InsufficientSamples { .. } => 3,
            _ => 4,
        }
    }
}
