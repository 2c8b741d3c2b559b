use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("initial velocity {value} for car {index} is outside [{min}, {max}] m/s")]
    VelocityOutOfRange {
        index: usize,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("scenario needs {expected} initial velocities, got {got}")]
    ScenarioLength { expected: usize, got: usize },

    #[error("cannot step a terminal world state")]
    TerminalStep,

    #[error(
        "infeasible reward design: r_arrive - r_collision = {margin:.2} < 2d/v_max = {required:.2}"
    )]
    RewardInfeasible { margin: f64, required: f64 },

    #[error("observation has {got} components, network expects {expected}")]
    InputLength { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at episode {episode}, training iteration {iteration}")]
    NonFiniteLoss { episode: usize, iteration: u64 },

    #[error("missing snapshot '{tag}' under {}", dir.display())]
    MissingSnapshot { tag: String, dir: PathBuf },

    #[error("output directory {} is not empty (use --force to overwrite)", .0.display())]
    OutputExists(PathBuf),

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
