use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("channel {channel} has zero variance and epsilon is 0")]
    Singularity { channel: usize },

    #[error("CTC target of length {target_len} needs at least {required} timesteps, got {timesteps}")]
    Infeasible {
        target_len: usize,
        required: usize,
        timesteps: usize,
    },

    #[error("brute-force enumeration refused: {paths} paths exceeds the guard of {limit}")]
    GuardExceeded { paths: u128, limit: u128 },

    #[error("decode error at byte {offset}: {message}")]
    Decode { offset: u64, message: String },

    #[error("unsupported resize from {from_w}x{from_h} to {to_w}x{to_h}: only reduction is supported")]
    UnsupportedDirection {
        from_w: usize,
        from_h: usize,
        to_w: usize,
        to_h: usize,
    },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing input: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("engine exited with status {status}: {stderr}")]
    Engine { status: String, stderr: String },

    #[error("engine timed out after {0} ms")]
    Timeout(u64),

    #[error("empty analysis: {0}")]
    EmptyAnalysis(String),

    #[error("non-finite loss {loss} at iteration {iteration}; snapshot written to {}", .snapshot.display())]
    NonFiniteLoss {
        iteration: usize,
        loss: f64,
        snapshot: PathBuf,
    },

    #[error("too many engine failures: {failed} of {total} samples failed (first: {first})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad user input or configuration rather
    /// than by a failure while doing the work.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::MissingPath(_) | Error::Parameter(_)
        )
    }
}
