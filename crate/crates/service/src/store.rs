//! Append-only JSONL event log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use perception_core::records::RatingRecord;
use perception_core::simulate::TrapOutcome;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    SessionCreated {
        study_id: String,
        session_id: String,
        worker_id: String,
        slot: usize,
    },
    Response {
        study_id: String,
        session_id: String,
        item_index: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        record: Option<RatingRecord>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        trap: Option<TrapOutcome>,
    },
}

struct Inner {
    file: File,
    events: Vec<LogEvent>,
}

/// Single writer: appends are serialized by the mutex and fsynced before
/// they become visible to readers.
#[derive(Clone)]
pub struct EventLog {
    path: PathBuf,
    inner: Arc<Mutex<Inner>>,
}

impl EventLog {
    /// Opens the log with every complete event. A torn final line left by a
    /// crash during an unacknowledged append is cut off.
    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        let io = |e| ServiceError::Io { path: path.to_path_buf(), source: e };
        let file = OpenOptions::new().create(true).read(true).append(true).open(path).map_err(io)?;
        let (events, good_len) = parse(path, &file)?;
        if file.metadata().map_err(io)?.len() != good_len {
            file.set_len(good_len).map_err(io)?;
            file.sync_all().map_err(io)?;
        }
        Ok(EventLog {
            path: path.to_path_buf(),
            inner: Arc::new(Mutex::new(Inner { file, events })),
        })
    }

    /// Writes `event`, waits for it to reach the disk and only then records it.
    pub fn append(&self, event: LogEvent) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(&event).expect("log events serialize");
        line.push(b'\n');
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        let io = |e| ServiceError::Io { path: self.path.clone(), source: e };
        inner.file.write_all(&line).map_err(io)?;
        inner.file.sync_data().map_err(io)?;
        inner.events.push(event);
        Ok(())
    }

    /// A consistent prefix of the log.
    pub fn events(&self) -> Vec<LogEvent> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).events.clone()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads the complete events of a log without modifying it.
pub fn read_events(path: &Path) -> Result<Vec<LogEvent>, ServiceError> {
    let file = File::open(path).map_err(|e| ServiceError::Io { path: path.to_path_buf(), source: e })?;
    Ok(parse(path, &file)?.0)
}

/// Complete events and the byte length they occupy.
fn parse(path: &Path, file: &File) -> Result<(Vec<LogEvent>, u64), ServiceError> {
    let io = |e| ServiceError::Io { path: path.to_path_buf(), source: e };
    let mut events = Vec::new();
    let mut good_len = 0u64;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut number = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(io)?;
        if n == 0 {
            break;
        }
        number += 1;
        // The newline is the last byte of an append, so only the final line
        // can lack it.
        if !line.ends_with('\n') {
            log::warn!("{}: ignoring torn final line {number}", path.display());
            break;
        }
        match serde_json::from_str::<LogEvent>(line.trim_end()) {
            Ok(ev) => {
                events.push(ev);
                good_len += n as u64;
            }
            Err(e) => {
                return Err(ServiceError::CorruptLog {
                    path: path.to_path_buf(),
                    line: number,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok((events, good_len))
}
