//! On-disk session persistence.
//!
//! Layout under the data directory:
//!
//! ```text
//! sessions/<session_id>/events.jsonl     one LogRecord per line, append-only
//! sessions/<session_id>/scans/<scan_id>  uploaded scan bytes
//! ```
//!
//! A crash can leave at most one partially written trailing line; it is
//! dropped (and truncated away) when the log is reopened.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use dxagent_core::{AgentResponse, CoordinationStrategy, Query, ScanRef, SessionState, TraceEvent};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LOG_FILE: &str = "events.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Created {
        session_id: String,
        created_at: DateTime<Utc>,
        strategy: CoordinationStrategy,
    },
    Strategy {
        strategy: CoordinationStrategy,
    },
    Scan {
        scan: ScanRef,
    },
    Trace {
        event: TraceEvent,
    },
    Exchange {
        query: Query,
        response: AgentResponse,
    },
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: corrupt record: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("{path}: log does not start with a session record")]
    MissingHeader { path: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Session ids become directory names, so only uuid-style ids are accepted.
pub fn is_valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_hexdigit() || b == b'-')
}

pub fn sessions_dir(data_dir: &Path) -> PathBuf {
    data_dir.join("sessions")
}

pub fn session_dir(data_dir: &Path, session_id: &str) -> PathBuf {
    sessions_dir(data_dir).join(session_id)
}

/// Append handle for one session's log.
#[derive(Debug)]
pub struct SessionLog {
    path: PathBuf,
    file: File,
    records: u64,
}

impl SessionLog {
    pub fn create(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self { path, file, records: 0 })
    }

    fn reopen(path: PathBuf, records: u64) -> Result<Self, StoreError> {
        let file = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
        Ok(Self { path, file, records })
    }

    /// Number of records in the log.
    pub fn len(&self) -> u64 {
        self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records == 0
    }

    /// Appends `records` with a single write and syncs the file.
    pub fn append(&mut self, records: &[LogRecord]) -> Result<(), StoreError> {
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).expect("log records serialize");
            buf.push(b'\n');
        }
        self.file.write_all(&buf).map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))?;
        self.records += records.len() as u64;
        Ok(())
    }
}

/// A session rebuilt from its log.
#[derive(Debug)]
pub struct RestoredSession {
    pub created_at: DateTime<Utc>,
    pub strategy: CoordinationStrategy,
    pub state: SessionState,
    pub log: SessionLog,
}

/// Reads the log in `dir`, dropping a torn trailing line.
pub fn restore_session(dir: &Path) -> Result<RestoredSession, StoreError> {
    let path = dir.join(LOG_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete < bytes.len() {
        tracing::warn!(path = %path.display(), dropped = bytes.len() - complete, "dropping torn trailing record");
        let f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
        f.set_len(complete as u64).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))?;
    }

    let mut header: Option<(DateTime<Utc>, CoordinationStrategy, SessionState)> = None;
    let mut count = 0u64;
    for (i, line) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let record: LogRecord = serde_json::from_slice(line).map_err(|e| StoreError::Corrupt {
            path: path.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        count += 1;
        match (record, header.as_mut()) {
            (
                LogRecord::Created {
                    session_id,
                    created_at,
                    strategy,
                },
                None,
            ) => header = Some((created_at, strategy, SessionState::new(session_id))),
            (_, None) | (LogRecord::Created { .. }, Some(_)) => {
                return Err(StoreError::MissingHeader { path: path.clone() })
            }
            (LogRecord::Strategy { strategy }, Some(h)) => h.1 = strategy,
            (LogRecord::Scan { scan }, Some(h)) => {
                h.2.put_scan(scan);
            }
            (LogRecord::Trace { event }, Some(h)) => {
                let seq = event.seq;
                if !h.2.restore_trace(event) {
                    return Err(StoreError::Corrupt {
                        path: path.clone(),
                        line: i + 1,
                        message: format!("trace seq {seq} does not advance the log"),
                    });
                }
            }
            (LogRecord::Exchange { query, response }, Some(h)) => h.2.push_exchange(query, response),
        }
    }
    let (created_at, strategy, state) = header.ok_or(StoreError::MissingHeader { path: path.clone() })?;
    Ok(RestoredSession {
        created_at,
        strategy,
        state,
        log: SessionLog::reopen(path, count)?,
    })
}

/// Restores every session under `data_dir`. Sessions whose log cannot be
/// read are skipped with an error log entry.
pub fn restore_all(data_dir: &Path) -> Result<Vec<RestoredSession>, StoreError> {
    let root = sessions_dir(data_dir);
    fs::create_dir_all(&root).map_err(io_err(&root))?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(io_err(&root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(is_valid_session_id))
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        match restore_session(&dir) {
            Ok(s) => out.push(s),
            Err(e) => tracing::error!(error = %e, "skipping unreadable session"),
        }
    }
    Ok(out)
}

/// Writes scan bytes atomically (temp file, then rename) and returns the
/// final path.
pub fn write_blob(session_dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, StoreError> {
    let dir = session_dir.join("scans");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))?;
    Ok(path)
}
