use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported or malformed audio: {0}")]
    Format(String),
    #[error("input too short: {got} samples, need at least {need}")]
    InputTooShort { got: usize, need: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("degenerate output: {0}")]
    DegenerateOutput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("unavailable: {0}")]
    Unavailable(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
