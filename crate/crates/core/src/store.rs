//! Append-only run store.
//!
//! Layout under the data directory:
//!
//! ```text
//! events.jsonl               one {seq, run_id, at, event} record per line
//! events.jsonl.corrupt-<n>   bytes cut from a damaged tail at offset n
//! reports/<run_id>.{json,md} rendered reports
//! ```
//!
//! Views (run records, tickets, scripts) are the fold of the log and are
//! rebuilt on open.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EventSink, RunEvent, RunRecord, RunStatus};

pub const EVENT_LOG: &str = "events.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("event encoding failed: {0}")]
    Encode(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub run_id: String,
    pub at: DateTime<Utc>,
    pub event: RunEvent,
}

/// Where replay stopped on a damaged log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Corruption {
    /// Byte offset of the first unreadable record.
    pub offset: u64,
    /// 1-based line number of that record.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Replay {
    pub envelopes: Vec<Envelope>,
    pub runs: BTreeMap<String, RunRecord>,
    pub corruption: Option<Corruption>,
}

/// Folds a log's bytes. Stops at the first record that is not a complete,
/// well-formed line.
pub fn replay_bytes(bytes: &[u8]) -> Replay {
    let mut out = Replay::default();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let rest = &bytes[offset..];
        let (line, consumed) = match rest.iter().position(|b| *b == b'\n') {
            Some(end) => (&rest[..end], end + 1),
            None => {
                out.corruption = Some(Corruption {
                    offset: offset as u64,
                    line: line_no,
                    message: "truncated record (no trailing newline)".into(),
                });
                break;
            }
        };
        if line.iter().all(u8::is_ascii_whitespace) {
            offset += consumed;
            continue;
        }
        match serde_json::from_slice::<Envelope>(line) {
            Ok(env) => {
                out.runs
                    .entry(env.run_id.clone())
                    .or_insert_with(|| RunRecord::new(&env.run_id))
                    .apply(&env.event);
                out.envelopes.push(env);
            }
            Err(e) => {
                out.corruption = Some(Corruption { offset: offset as u64, line: line_no, message: e.to_string() });
                break;
            }
        }
        offset += consumed;
    }
    out
}

pub fn replay_file(path: &Path) -> Result<Replay, StoreError> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(replay_bytes(&bytes)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Replay::default()),
        Err(e) => Err(io_err(path)(e)),
    }
}

/// Called with each new envelope; returning false unsubscribes.
pub type Subscriber = Box<dyn FnMut(&Arc<Envelope>) -> bool + Send>;

struct Inner {
    file: File,
    next_seq: u64,
    log: Vec<Arc<Envelope>>,
    runs: BTreeMap<String, RunRecord>,
    subscribers: Vec<Subscriber>,
}

pub struct RunStore {
    dir: PathBuf,
    inner: Mutex<Inner>,
    recovered: Option<Corruption>,
}

impl std::fmt::Debug for RunStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunStore").field("dir", &self.dir).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub status: RunStatus,
    pub plan: Option<String>,
    pub devices: Vec<String>,
    pub started_at: Option<DateTime<Utc>>,
    pub ended_at: Option<DateTime<Utc>>,
}

impl RunStore {
    /// Opens (or creates) a store. A damaged tail is moved aside to
    /// `events.jsonl.corrupt-<offset>` and reported by [`RunStore::recovered`].
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(EVENT_LOG);
        let replay = replay_file(&path)?;
        if let Some(c) = &replay.corruption {
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            let side = dir.join(format!("{EVENT_LOG}.corrupt-{}", c.offset));
            std::fs::write(&side, &bytes[c.offset as usize..]).map_err(io_err(&side))?;
            let f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
            f.set_len(c.offset).map_err(io_err(&path))?;
            tracing::warn!(offset = c.offset, line = c.line, "event log tail was damaged and moved aside");
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        let next_seq = replay.envelopes.last().map(|e| e.seq + 1).unwrap_or(1);
        Ok(Self {
            dir,
            inner: Mutex::new(Inner {
                file,
                next_seq,
                log: replay.envelopes.into_iter().map(Arc::new).collect(),
                runs: replay.runs,
                subscribers: Vec::new(),
            }),
            recovered: replay.corruption,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(EVENT_LOG)
    }

    pub fn recovered(&self) -> Option<&Corruption> {
        self.recovered.as_ref()
    }

    /// Appends one event, updates views and notifies subscribers.
    pub fn append(&self, run_id: &str, event: RunEvent) -> Result<Arc<Envelope>, StoreError> {
        let mut inner = self.inner.lock().unwrap();
        let env = Arc::new(Envelope { seq: inner.next_seq, run_id: run_id.to_string(), at: Utc::now(), event });
        let mut line = serde_json::to_string(&*env).map_err(|e| StoreError::Encode(e.to_string()))?;
        line.push('\n');
        let path = self.log_path();
        inner.file.write_all(line.as_bytes()).map_err(io_err(&path))?;
        inner.file.flush().map_err(io_err(&path))?;
        inner.next_seq += 1;
        inner
            .runs
            .entry(run_id.to_string())
            .or_insert_with(|| RunRecord::new(run_id))
            .apply(&env.event);
        inner.log.push(env.clone());
        inner.subscribers.retain_mut(|s| s(&env));
        Ok(env)
    }

    pub fn run(&self, run_id: &str) -> Option<RunRecord> {
        self.inner.lock().unwrap().runs.get(run_id).cloned()
    }

    pub fn runs(&self) -> Vec<RunSummary> {
        self.inner
            .lock()
            .unwrap()
            .runs
            .values()
            .map(|r| RunSummary {
                run_id: r.run_id.clone(),
                status: r.status,
                plan: r.campaign.as_ref().map(|c| c.plan_name.clone()),
                devices: r.campaign.iter().flat_map(|c| c.devices.iter().map(|d| d.endpoint.clone())).collect(),
                started_at: r.started_at,
                ended_at: r.ended_at,
            })
            .collect()
    }

    /// Events of `run_id` with `seq > after`.
    pub fn events(&self, run_id: &str, after: u64) -> Vec<Arc<Envelope>> {
        let inner = self.inner.lock().unwrap();
        inner.log.iter().filter(|e| e.run_id == run_id && e.seq > after).cloned().collect()
    }

    /// Registers `subscriber` and returns the backlog of `run_id` after `after`,
    /// atomically: every later event reaches the subscriber, none twice.
    pub fn subscribe(&self, run_id: &str, after: u64, subscriber: Subscriber) -> Vec<Arc<Envelope>> {
        let mut inner = self.inner.lock().unwrap();
        let backlog = inner.log.iter().filter(|e| e.run_id == run_id && e.seq > after).cloned().collect();
        inner.subscribers.push(subscriber);
        backlog
    }

    /// Marks runs left unfinished by an earlier process as aborted.
    pub fn abort_unfinished(&self, reason: &str) -> Result<Vec<String>, StoreError> {
        let open: Vec<String> = {
            let inner = self.inner.lock().unwrap();
            inner.runs.values().filter(|r| !r.is_finished()).map(|r| r.run_id.clone()).collect()
        };
        for id in &open {
            self.append(id, RunEvent::RunAborted { reason: reason.to_string(), at: Utc::now() })?;
        }
        Ok(open)
    }

    pub fn report_path(&self, run_id: &str, ext: &str) -> PathBuf {
        self.dir.join("reports").join(format!("{run_id}.{ext}"))
    }

    pub fn save_report(&self, run_id: &str, json: &str, markdown: &str) -> Result<(), StoreError> {
        let dir = self.dir.join("reports");
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (ext, body) in [("json", json), ("md", markdown)] {
            let path = self.report_path(run_id, ext);
            std::fs::write(&path, body).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

impl EventSink for RunStore {
    fn emit(&self, run_id: &str, event: &RunEvent) -> Result<(), String> {
        self.append(run_id, event.clone()).map(|_| ()).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aborted(reason: &str) -> RunEvent {
        RunEvent::RunAborted { reason: reason.into(), at: Utc::now() }
    }

    #[test]
    fn empty_log_gives_empty_views() {
        let r = replay_bytes(b"");
        assert!(r.runs.is_empty() && r.envelopes.is_empty() && r.corruption.is_none());
    }

    #[test]
    fn append_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = RunStore::open(dir.path()).unwrap();
            store.append("r1", aborted("x")).unwrap();
            store.append("r2", aborted("y")).unwrap();
        }
        let store = RunStore::open(dir.path()).unwrap();
        assert_eq!(store.runs().len(), 2);
        assert_eq!(store.run("r1").unwrap().status, RunStatus::Aborted);
        let env = store.append("r1", aborted("z")).unwrap();
        assert_eq!(env.seq, 3);
    }

    #[test]
    fn truncated_tail_is_reported_and_cut() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = RunStore::open(dir.path()).unwrap();
            store.append("r1", aborted("x")).unwrap();
        }
        let path = dir.path().join(EVENT_LOG);
        let good_len = std::fs::metadata(&path).unwrap().len();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"seq":2,"run_id":"r1","at":"#).unwrap();
        drop(f);

        let r = replay_file(&path).unwrap();
        assert_eq!(r.envelopes.len(), 1);
        assert_eq!(r.corruption.as_ref().unwrap().offset, good_len);
        assert_eq!(r.corruption.as_ref().unwrap().line, 2);

        let store = RunStore::open(dir.path()).unwrap();
        assert_eq!(store.recovered().unwrap().offset, good_len);
        store.append("r1", aborted("after")).unwrap();
        assert!(replay_file(&path).unwrap().corruption.is_none());
        assert!(dir.path().join(format!("{EVENT_LOG}.corrupt-{good_len}")).exists());
    }

    #[test]
    fn subscription_has_no_gap_or_duplicate() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        store.append("r", aborted("1")).unwrap();
        store.append("other", aborted("x")).unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let sink = seen.clone();
        let backlog = store.subscribe(
            "r",
            0,
            Box::new(move |e| {
                if e.run_id == "r" {
                    sink.lock().unwrap().push(e.seq);
                }
                true
            }),
        );
        store.append("r", aborted("2")).unwrap();
        let mut all: Vec<u64> = backlog.iter().map(|e| e.seq).collect();
        all.extend(seen.lock().unwrap().iter());
        assert_eq!(all, vec![1, 3]);
    }
}
