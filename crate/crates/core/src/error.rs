use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("position ({x}, {y}) outside workspace [-{extent}, {extent}]²")]
    OutOfBounds { x: f64, y: f64, extent: f64 },
    #[error("step called on a finished episode")]
    EpisodeOver,
    #[error("label {0} not visible in mask")]
    NotVisible(u8),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] diffcore::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
