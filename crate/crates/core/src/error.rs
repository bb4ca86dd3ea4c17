use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, got {got}")]
    Dimension {
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid probability distribution {what}: {detail}")]
    InvalidDistribution { what: String, detail: String },

    #[error("invalid value for {name}: {detail}")]
    InvalidParameter { name: &'static str, detail: String },

    #[error("probability ratio undefined: reference policy has zero mass at state {state}, action {action}")]
    ZeroProbability { state: usize, action: usize },

    #[error("horizon k = {k} outside the supported range {min}..={max}")]
    HorizonOutOfRange { k: usize, min: usize, max: usize },

    #[error("TayPO bound is unbounded in this regime: 1 - gamma - gamma*eps = {margin} <= 0")]
    TaypoRegime { margin: f64 },

    #[error("invalid action {action}: environment has {n_actions} actions")]
    InvalidAction { action: usize, n_actions: usize },

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("training diverged at update {update}: {detail}")]
    Diverged { update: usize, detail: String },

    #[error("on-policy check failed at update {update}: first-step ratio deviates from 1 by {deviation:e}")]
    OffPolicy { update: usize, deviation: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_finite(value: f64, what: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what() })
    }
}
