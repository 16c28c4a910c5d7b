use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix contains non-finite entries")]
    InvalidMatrix,
    #[error("constraint Jacobian is rank deficient (sigma_min/sigma_max = {ratio:.3e})")]
    RankDeficientConstraint { ratio: f64 },
    #[error("matrix is not symmetric positive-definite")]
    NotPositiveDefinite,
    #[error("task-space inertia is singular")]
    SingularTaskInertia,
    #[error("extended Jacobian is singular")]
    SingularExtendedJacobian,
    #[error("insertion factor alpha = {0} outside (0, 1]")]
    InvalidAlpha(f64),
    #[error("tool length mismatch: |p_t - p_r| = {measured} but L_tool = {expected}")]
    InconsistentTool { measured: f64, expected: f64 },
    #[error("invalid model: {0}")]
    Model(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("simulation diverged at tick {tick} (t = {time:.4} s): {reason}")]
    SimulationDiverged {
        tick: usize,
        time: f64,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed trace: {0}")]
    Trace(String),
    #[error("usage: {0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
