//! Append-only verdict log. Every accepted verdict is written and fsynced
//! before it is acknowledged; the log is replayed on startup.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use offscan_core::smid::Label;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Keep,
    Offensive,
    Unsure,
}

impl Decision {
    /// Training label implied by the decision; `unsure` carries none.
    pub fn label(self) -> Option<Label> {
        match self {
            Self::Keep => Some(Label::NonOffensive),
            Self::Offensive => Some(Label::Offensive),
            Self::Unsure => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub id: String,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub reviewer: String,
    /// UTC seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct VerdictRequest {
    pub id: String,
    pub decision: Decision,
    #[serde(default)]
    pub note: Option<String>,
    pub reviewer: String,
}

pub fn now_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub struct VerdictLog {
    path: PathBuf,
    file: File,
    history: BTreeMap<String, Vec<Verdict>>,
}

fn storage(path: &Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Storage(format!("{}: {e}", path.display()))
}

impl VerdictLog {
    /// Opens (creating if needed) and replays the log. A torn final line
    /// from a crash mid-append is dropped; corruption anywhere else is an
    /// error.
    pub fn open(path: &Path) -> ServiceResult<Self> {
        let mut history: BTreeMap<String, Vec<Verdict>> = BTreeMap::new();
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(storage(path, e)),
        };
        // Byte length of the prefix made of complete, parseable lines.
        let mut valid_len = 0usize;
        let mut offset = 0usize;
        let mut line_no = 0usize;
        while offset < bytes.len() {
            line_no += 1;
            let end = bytes[offset..].iter().position(|&b| b == b'\n').map(|p| offset + p);
            let line = &bytes[offset..end.unwrap_or(bytes.len())];
            let parsed = if line.iter().all(u8::is_ascii_whitespace) {
                None
            } else {
                Some(serde_json::from_slice::<Verdict>(line))
            };
            match (parsed, end) {
                (None, Some(e)) => valid_len = e + 1,
                (Some(Ok(v)), Some(e)) => {
                    history.entry(v.id.clone()).or_default().push(v);
                    valid_len = e + 1;
                }
                // No newline: the final append never completed.
                (_, None) => {
                    log::warn!("{}: dropping torn final line", path.display());
                    break;
                }
                (Some(Err(e)), Some(_)) => return Err(storage(path, format!("line {line_no}: {e}"))),
            }
            offset = end.map_or(bytes.len(), |e| e + 1);
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| storage(path, e))?;
        if bytes.len() > valid_len {
            file.set_len(valid_len as u64).map_err(|e| storage(path, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
            history,
        })
    }

    /// Persists `verdict` durably, then makes it visible.
    pub fn append(&mut self, verdict: Verdict) -> ServiceResult<()> {
        let mut line = serde_json::to_vec(&verdict).map_err(|e| storage(&self.path, e))?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| storage(&self.path, e))?;
        self.file.sync_data().map_err(|e| storage(&self.path, e))?;
        self.history.entry(verdict.id.clone()).or_default().push(verdict);
        Ok(())
    }

    pub fn active(&self, id: &str) -> Option<&Verdict> {
        self.history.get(id).and_then(|h| h.last())
    }

    pub fn history(&self, id: &str) -> &[Verdict] {
        self.history.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Latest verdict per record, by id.
    pub fn active_all(&self) -> impl Iterator<Item = &Verdict> {
        self.history.values().filter_map(|h| h.last())
    }

    pub fn counts(&self) -> VerdictCounts {
        let mut c = VerdictCounts::default();
        for v in self.active_all() {
            match v.decision {
                Decision::Keep => c.keep += 1,
                Decision::Offensive => c.offensive += 1,
                Decision::Unsure => c.unsure += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub keep: usize,
    pub offensive: usize,
    pub unsure: usize,
}

impl VerdictCounts {
    pub fn labeled(&self) -> usize {
        self.keep + self.offensive
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(id: &str, d: Decision, t: u64) -> Verdict {
        Verdict {
            id: id.into(),
            decision: d,
            note: None,
            reviewer: "r".into(),
            timestamp: t,
        }
    }

    #[test]
    fn latest_wins_and_history_is_kept() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("verdicts.jsonl");
        let mut log = VerdictLog::open(&path).unwrap();
        log.append(v("a", Decision::Keep, 1)).unwrap();
        log.append(v("a", Decision::Offensive, 2)).unwrap();
        log.append(v("b", Decision::Unsure, 3)).unwrap();
        assert_eq!(log.active("a").unwrap().decision, Decision::Offensive);
        assert_eq!(log.history("a").len(), 2);
        drop(log);
        let log = VerdictLog::open(&path).unwrap();
        assert_eq!(log.active("a").unwrap().decision, Decision::Offensive);
        assert_eq!(log.history("a").len(), 2);
        assert_eq!(
            log.counts(),
            VerdictCounts {
                keep: 0,
                offensive: 1,
                unsure: 1
            }
        );
    }

    #[test]
    fn torn_tail_is_dropped_and_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("verdicts.jsonl");
        let mut log = VerdictLog::open(&path).unwrap();
        log.append(v("a", Decision::Keep, 1)).unwrap();
        drop(log);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"id\":\"b\",\"deci").unwrap();
        drop(f);
        let mut log = VerdictLog::open(&path).unwrap();
        assert_eq!(log.history("b").len(), 0);
        log.append(v("c", Decision::Keep, 2)).unwrap();
        drop(log);
        let log = VerdictLog::open(&path).unwrap();
        assert_eq!(log.active("c").unwrap().timestamp, 2);
        assert_eq!(log.active("a").unwrap().timestamp, 1);
    }

    #[test]
    fn corruption_in_the_middle_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("verdicts.jsonl");
        std::fs::write(&path, "garbage\n{\"id\":\"a\",\"decision\":\"keep\",\"reviewer\":\"r\",\"timestamp\":1}\n").unwrap();
        assert!(matches!(VerdictLog::open(&path), Err(ServiceError::Storage(_))));
    }
}
