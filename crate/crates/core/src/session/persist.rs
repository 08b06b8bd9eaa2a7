//! Session directory layout and state round-tripping. Everything is
//! plain JSON (the vote log is JSON lines) so interrupted sessions can
//! be resumed and recorded sessions replayed.

use super::SessionError;
use crate::memory::VoteRecord;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const SESSION_FILE: &str = "session.json";
pub const TREE_FILE: &str = "tree.json";
pub const STM_FILE: &str = "stm.json";
pub const LTM_FILE: &str = "ltm.json";
/// Snapshot of the long-term memory a fresh session started from;
/// replay seeds its memory from this instead of the live document.
pub const LTM_START_FILE: &str = "ltm_start.json";
pub const LEDGER_FILE: &str = "ledger.json";
pub const REPORT_FILE: &str = "report.json";
pub const TRANSCRIPT_FILE: &str = "transcript.json";
pub const VOTE_LOG_FILE: &str = "vote_log.jsonl";
pub const PROGRESS_FILE: &str = "progress.json";
pub const NODES_DIR: &str = "nodes";

/// Wall-clock bookkeeping that must survive an interruption; kept out
/// of the report so reports stay byte-comparable.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Progress {
    pub elapsed_s: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SessionError> {
    let mut body = serde_json::to_string_pretty(value).expect("session state is plain data");
    body.push('\n');
    fs::write(path, body).map_err(SessionError::Io)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, SessionError> {
    let text = fs::read_to_string(path)
        .map_err(|e| SessionError::Corrupt(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| SessionError::Corrupt(format!("{}: {e}", path.display())))
}

pub fn write_vote_log(path: &Path, records: &[VoteRecord]) -> Result<(), SessionError> {
    let mut body = String::new();
    for record in records {
        body.push_str(&serde_json::to_string(record).expect("vote records are plain data"));
        body.push('\n');
    }
    fs::write(path, body).map_err(SessionError::Io)
}

pub fn read_vote_log(path: &Path) -> Result<Vec<VoteRecord>, SessionError> {
    let text = fs::read_to_string(path)
        .map_err(|e| SessionError::Corrupt(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line)
                .map_err(|e| SessionError::Corrupt(format!("{}: {e}", path.display())))
        })
        .collect()
}
