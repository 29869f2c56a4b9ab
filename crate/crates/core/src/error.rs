use thiserror::Error;

use crate::train::FieldNet;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A `(1 - kappa)` or `(1 - t)` denominator vanished.
    #[error("singularity at t = {t}: {what}")]
    Singularity { t: f64, what: &'static str },

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("posterior is empty: every data point has zero likelihood")]
    EmptyPosterior,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("step size too large: stay probability {stay} < 0, try h <= {suggested_h}")]
    StepSize { stay: f64, suggested_h: f64 },

    #[error("quadrature grid does not cover the support: {0}")]
    Coverage(String),

    #[error("numerical instability: {0}")]
    Instability(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        last_good: Box<FieldNet>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
