//! Append-only JSONL log of review annotations, corrections and queue status
//! changes. The review queue state of a trace is a fold over its entries.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::filter::ReviewAnnotation;
use crate::hashing::short_hash;
use crate::reflection::Correction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueStatus {
    Pending,
    Annotated,
    Approved,
    Rejected,
}

impl QueueStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QueueStatus::Pending => "pending",
            QueueStatus::Annotated => "annotated",
            QueueStatus::Approved => "approved",
            QueueStatus::Rejected => "rejected",
        }
    }

    /// Allowed moves: pending to annotated, annotated to approved or rejected.
    pub fn can_move_to(&self, next: QueueStatus) -> bool {
        matches!(
            (self, next),
            (QueueStatus::Pending, QueueStatus::Annotated)
                | (QueueStatus::Annotated, QueueStatus::Approved)
                | (QueueStatus::Annotated, QueueStatus::Rejected)
        )
    }
}

impl std::str::FromStr for QueueStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(QueueStatus::Pending),
            "annotated" => Ok(QueueStatus::Annotated),
            "approved" => Ok(QueueStatus::Approved),
            "rejected" => Ok(QueueStatus::Rejected),
            _ => Err(format!("unknown status `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AnnotationBody {
    Review(ReviewAnnotation),
    Correction(Correction),
    Status {
        from: QueueStatus,
        to: QueueStatus,
        #[serde(default)]
        assigned_to: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationEntry {
    pub annotation_id: String,
    pub seq: usize,
    pub trace_id: String,
    pub body: AnnotationBody,
}

#[derive(Debug, Clone)]
pub struct AnnotationLog {
    path: PathBuf,
}

impl AnnotationLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// All entries in append order. A missing file is an empty log.
    pub fn entries(&self) -> Result<Vec<AnnotationEntry>, StoreError> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => {
                return Err(StoreError::Io {
                    path: self.path.clone(),
                    source,
                })
            }
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| {
                    StoreError::CorruptRecord(format!(
                        "{} line {}: {e}",
                        self.path.display(),
                        i + 1
                    ))
                })
            })
            .collect()
    }

    /// Appends one entry as a single line write. Callers sharing a log within
    /// a process must serialize appends themselves.
    pub fn append(
        &self,
        trace_id: &str,
        body: AnnotationBody,
    ) -> Result<AnnotationEntry, StoreError> {
        let seq = self.entries()?.len();
        let body_json = serde_json::to_string(&body).expect("annotation serializes");
        let entry = AnnotationEntry {
            annotation_id: short_hash(format!("{seq}\n{trace_id}\n{body_json}").as_bytes()),
            seq,
            trace_id: trace_id.to_string(),
            body,
        };
        let mut line = serde_json::to_string(&entry).expect("annotation serializes");
        line.push('\n');
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| StoreError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        let io = |source| StoreError::Io {
            path: self.path.clone(),
            source,
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io)?;
        f.write_all(line.as_bytes()).map_err(io)?;
        Ok(entry)
    }

    /// Current queue status of `trace_id`.
    pub fn status_of(&self, trace_id: &str) -> Result<QueueStatus, StoreError> {
        Ok(fold_status(
            self.entries()?.iter().filter(|e| e.trace_id == trace_id),
        ))
    }

    pub fn reviews(&self) -> Result<Vec<ReviewAnnotation>, StoreError> {
        Ok(self
            .entries()?
            .into_iter()
            .filter_map(|e| match e.body {
                AnnotationBody::Review(r) => Some(r),
                _ => None,
            })
            .collect())
    }

    pub fn corrections(&self) -> Result<Vec<Correction>, StoreError> {
        Ok(self
            .entries()?
            .into_iter()
            .filter_map(|e| match e.body {
                AnnotationBody::Correction(c) => Some(c),
                _ => None,
            })
            .collect())
    }
}

/// Folds a trace's entries into its queue status. The first review or
/// correction moves a pending trace to annotated; status entries apply only
/// when they start from the status current at that point.
pub fn fold_status<'a>(entries: impl IntoIterator<Item = &'a AnnotationEntry>) -> QueueStatus {
    let mut status = QueueStatus::Pending;
    for e in entries {
        match &e.body {
            AnnotationBody::Review(_) | AnnotationBody::Correction(_) => {
                if status == QueueStatus::Pending {
                    status = QueueStatus::Annotated;
                }
            }
            AnnotationBody::Status { from, to, .. } => {
                if *from == status && status.can_move_to(*to) {
                    status = *to;
                }
            }
        }
    }
    status
}

/// Assignee recorded by the latest status entry that carried one.
pub fn assignee<'a>(entries: impl IntoIterator<Item = &'a AnnotationEntry>) -> Option<String> {
    entries
        .into_iter()
        .filter_map(|e| match &e.body {
            AnnotationBody::Status { assigned_to, .. } => assigned_to.clone(),
            _ => None,
        })
        .last()
}
