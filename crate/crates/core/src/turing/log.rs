//! Append-only JSON-lines label log: one `created` event, then one `label`
//! event per accepted label.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::session::{ReviewRecord, TuringSession};
use super::{Result, TuringError, Verdict};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedItem {
    pub item_id: String,
    pub tile_ref: String,
    pub truth: Verdict,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Created { session_id: String, reviewer_id: String, seed: u64, n_each: usize, items: Vec<LoggedItem> },
    Label(ReviewRecord),
}

impl LogEvent {
    /// Appends one line and flushes it to disk.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        let mut line = serde_json::to_vec(self)?;
        line.push(b'\n');
        f.write_all(&line)?;
        f.sync_data()?;
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogEvent>> {
    let mut events = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(
            serde_json::from_str(&line).map_err(|e| TuringError::Log(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(events)
}

/// Rebuilds a session by re-applying its events in order. Images are not
/// part of the log; see [`TuringSession::attach_images`].
pub fn replay_log(events: &[LogEvent]) -> Result<TuringSession> {
    let mut iter = events.iter();
    let mut session = match iter.next() {
        Some(LogEvent::Created { session_id, reviewer_id, seed, n_each, items }) => {
            TuringSession::from_logged(session_id.clone(), reviewer_id.clone(), *seed, *n_each, items.clone())?
        }
        _ => return Err(TuringError::Log("log must start with a `created` event".into())),
    };
    for ev in iter {
        match ev {
            LogEvent::Label(rec) => session.apply_record(rec.clone())?,
            LogEvent::Created { .. } => return Err(TuringError::Log("second `created` event".into())),
        }
    }
    Ok(session)
}
