//! Blinded real-versus-synthetic review: balanced sessions, an append-only
//! label log, accuracy statistics against a chance null, and a local HTTP
//! service.

mod log;
pub mod service;
mod session;
mod stats;

pub use self::log::{read_log, replay_log, LogEvent, LoggedItem};
pub use session::{build_session, BlindedItem, NextItem, ReviewRecord, SessionItem, SessionState, TuringSession};
pub use stats::{p_value, session_report, z_score, Confusion, RevealedItem, SessionReport, Sidedness, TuringStats};

use serde::{Deserialize, Serialize};

/// Ground truth of an item, and the reviewer's verdict about it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Real,
    Fake,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Real => "real",
            Verdict::Fake => "fake",
        }
    }
}

impl std::str::FromStr for Verdict {
    type Err = TuringError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Verdict::Real),
            "fake" => Ok(Verdict::Fake),
            _ => Err(TuringError::InvalidInput(format!("label must be `real` or `fake`, got `{s}`"))),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TuringError {
    #[error("{truth} pool holds {available} tiles, {needed} needed")]
    InsufficientPool { truth: &'static str, needed: usize, available: usize },
    #[error("real and fake tiles must share one class: {0}")]
    MixedClasses(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("item `{0}` is already labelled")]
    DuplicateLabel(String),
    #[error("item `{0}` has not been served yet")]
    NotServed(String),
    #[error("session `{0}` is not complete")]
    Incomplete(String),
    #[error("null accuracy {0} leaves no variance; it must lie strictly between 0 and 1")]
    DegenerateNull(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("label log: {0}")]
    Log(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = TuringError> = std::result::Result<T, E>;
