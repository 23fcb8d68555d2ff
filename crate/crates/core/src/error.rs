use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("signal too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },

    #[error("singular system at frequency bin {bin}")]
    SingularBin { bin: usize },

    #[error("ill-conditioned normal equations (condition estimate {cond:.3e})")]
    IllConditioned { cond: f64 },

    #[error("training diverged at epoch {epoch} (loss trace: {trace:?})")]
    Diverged { epoch: usize, trace: Vec<f64> },

    #[error("output clips: peak {peak:.4} exceeds full scale")]
    Clipping { peak: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Broad failure classes, mapped to distinct process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::TooShort { .. } => ErrorClass::Config,
            Error::Io(_) | Error::Wav(_) | Error::Json(_) => ErrorClass::Io,
            Error::SingularBin { .. }
            | Error::IllConditioned { .. }
            | Error::Diverged { .. }
            | Error::Clipping { .. }
            | Error::Degenerate(_) => ErrorClass::Numerical,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Config => 2,
            ErrorClass::Io => 3,
            ErrorClass::Numerical => 4,
        }
    }
}
