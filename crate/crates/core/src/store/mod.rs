//! On-disk traces: one pretty-printed JSON document per trace, stored under a
//! content-addressed path, plus a rebuildable index and an append-only
//! annotation log.
//!
//! Layout of a store directory:
//!
//! ```text
//! <root>/traces/<first two id chars>/<trace_id>.json
//! <root>/index.json          (rebuilt on demand)
//! <root>/annotations.jsonl   (append-only)
//! ```

pub mod adapters;
pub mod annotations;
pub mod sft;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, Platform};
use crate::agent::{Step, Termination, Trace};
use crate::hashing::short_hash;
use crate::sim::Observation;

pub use adapters::{
    adapter_by_id, adapter_ids, convert_external, ConvertError, ExternalSchemaAdapter,
};
pub use annotations::{AnnotationBody, AnnotationEntry, AnnotationLog, QueueStatus};
pub use sft::{export_sft, SftError, SftOptions, SftSample, StepMark, StepRole};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("trace `{0}` not found")]
    NotFound(String),
    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u64, expected: u32 },
    #[error("corrupt record: {0}")]
    CorruptRecord(String),
    #[error("trace id `{given}` does not match content id `{computed}`")]
    IdMismatch { given: String, computed: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub index: usize,
    pub observation_digest: String,
    pub observation: Observation,
    pub thought: Option<String>,
    pub action: Action,
    pub raw: String,
}

/// The serialized form of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub schema_version: u32,
    pub trace_id: String,
    pub instruction: String,
    pub platform: Platform,
    pub steps: Vec<StepRecord>,
    pub termination: Termination,
    pub metadata: BTreeMap<String, String>,
}

impl From<&Trace> for TraceRecord {
    fn from(t: &Trace) -> Self {
        TraceRecord {
            schema_version: SCHEMA_VERSION,
            trace_id: t.trace_id.clone(),
            instruction: t.instruction.clone(),
            platform: t.platform,
            steps: t
                .steps
                .iter()
                .map(|s| StepRecord {
                    index: s.step_index,
                    observation_digest: s.observation.digest.clone(),
                    observation: s.observation.clone(),
                    thought: s.thought.clone(),
                    action: s.action.clone(),
                    raw: s.raw_policy_output.clone(),
                })
                .collect(),
            termination: t.termination,
            metadata: t.metadata.clone(),
        }
    }
}

impl TraceRecord {
    /// Checks internal consistency and converts to a trace.
    pub fn into_trace(self) -> Result<Trace, StoreError> {
        for (i, s) in self.steps.iter().enumerate() {
            if s.index != i {
                return Err(StoreError::CorruptRecord(format!(
                    "step {i} has index {}",
                    s.index
                )));
            }
            if s.observation_digest != s.observation.digest || !s.observation.is_consistent() {
                return Err(StoreError::CorruptRecord(format!(
                    "step {i} observation digest mismatch"
                )));
            }
        }
        Ok(Trace {
            trace_id: self.trace_id,
            instruction: self.instruction,
            platform: self.platform,
            steps: self
                .steps
                .into_iter()
                .map(|s| Step {
                    step_index: s.index,
                    observation: s.observation,
                    thought: s.thought,
                    action: s.action,
                    raw_policy_output: s.raw,
                })
                .collect(),
            termination: self.termination,
            metadata: self.metadata,
        })
    }

    /// Canonical bytes: pretty JSON with a trailing newline.
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("record serializes");
        out.push(b'\n');
        out
    }
}

/// Content id: hash of the compact record with an empty id field.
pub fn content_id(trace: &Trace) -> String {
    let mut rec = TraceRecord::from(trace);
    rec.trace_id.clear();
    short_hash(&serde_json::to_vec(&rec).expect("record serializes"))
}

/// Canonical bytes of a trace.
pub fn encode_trace(trace: &Trace) -> Vec<u8> {
    TraceRecord::from(trace).to_canonical_bytes()
}

/// Parses a trace document, checking the schema version before anything else.
pub fn decode_trace(bytes: &[u8]) -> Result<Trace, StoreError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| StoreError::CorruptRecord(e.to_string()))?;
    let version = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| StoreError::CorruptRecord("missing schema_version".into()))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(StoreError::SchemaVersionMismatch {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let rec: TraceRecord =
        serde_json::from_value(value).map_err(|e| StoreError::CorruptRecord(e.to_string()))?;
    rec.into_trace()
}

pub fn write_trace_file(path: &Path, trace: &Trace) -> Result<(), StoreError> {
    atomic_write(path, &encode_trace(trace))
}

pub fn read_trace_file(path: &Path) -> Result<Trace, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_trace(&bytes)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Summary line of the index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub trace_id: String,
    pub instruction: String,
    pub platform: Platform,
    pub steps: usize,
    pub termination: Termination,
    pub task_id: Option<String>,
}

impl From<&Trace> for IndexEntry {
    fn from(t: &Trace) -> Self {
        IndexEntry {
            trace_id: t.trace_id.clone(),
            instruction: t.instruction.clone(),
            platform: t.platform,
            steps: t.len(),
            termination: t.termination,
            task_id: t.task_id().map(str::to_string),
        }
    }
}

/// A content-addressed trace store. Saves are atomic file creations, so
/// several writers (threads or processes) may share one directory.
#[derive(Debug, Clone)]
pub struct TraceStore {
    root: PathBuf,
}

impl TraceStore {
    /// Opens or creates a store at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let traces = root.join("traces");
        fs::create_dir_all(&traces).map_err(io_err(&traces))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, id: &str) -> Option<PathBuf> {
        let valid = id.len() >= 2 && id.bytes().all(|b| b.is_ascii_hexdigit());
        valid.then(|| {
            self.root
                .join("traces")
                .join(&id[..2])
                .join(format!("{id}.json"))
        })
    }

    /// Saves `trace` and returns its id. An empty id is filled with the content
    /// id; any other id must equal it. Saving an existing trace is a no-op.
    pub fn save_trace(&self, trace: &Trace) -> Result<String, StoreError> {
        let computed = content_id(trace);
        if !trace.trace_id.is_empty() && trace.trace_id != computed {
            return Err(StoreError::IdMismatch {
                given: trace.trace_id.clone(),
                computed,
            });
        }
        let path = self.path_for(&computed).expect("content ids are hex");
        if path.exists() {
            return Ok(computed);
        }
        let mut t = trace.clone();
        t.trace_id = computed.clone();
        atomic_write(&path, &encode_trace(&t))?;
        Ok(computed)
    }

    pub fn load_trace(&self, id: &str) -> Result<Trace, StoreError> {
        let bytes = self.load_bytes(id)?;
        let trace = decode_trace(&bytes)?;
        if trace.trace_id != id {
            return Err(StoreError::CorruptRecord(format!(
                "file for `{id}` holds `{}`",
                trace.trace_id
            )));
        }
        Ok(trace)
    }

    /// The stored document exactly as written.
    pub fn load_bytes(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        let path = self
            .path_for(id)
            .ok_or_else(|| StoreError::NotFound(id.to_string()))?;
        match fs::read(&path) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(StoreError::NotFound(id.to_string()))
            }
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.path_for(id).is_some_and(|p| p.exists())
    }

    /// All trace ids, sorted.
    pub fn list_ids(&self) -> Result<Vec<String>, StoreError> {
        let traces = self.root.join("traces");
        let mut ids = Vec::new();
        for shard in fs::read_dir(&traces).map_err(io_err(&traces))? {
            let shard = shard.map_err(io_err(&traces))?.path();
            if !shard.is_dir() {
                continue;
            }
            for f in fs::read_dir(&shard).map_err(io_err(&shard))? {
                let f = f.map_err(io_err(&shard))?.path();
                if f.extension().is_some_and(|e| e == "json") {
                    if let Some(stem) = f.file_stem().and_then(|s| s.to_str()) {
                        ids.push(stem.to_string());
                    }
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Every trace, ordered by id.
    pub fn load_all(&self) -> Result<Vec<Trace>, StoreError> {
        self.list_ids()?
            .iter()
            .map(|id| self.load_trace(id))
            .collect()
    }

    /// Rescans the store and rewrites `index.json`.
    pub fn rebuild_index(&self) -> Result<Vec<IndexEntry>, StoreError> {
        let entries: Vec<IndexEntry> = self.load_all()?.iter().map(IndexEntry::from).collect();
        let mut bytes = serde_json::to_vec_pretty(&entries).expect("index serializes");
        bytes.push(b'\n');
        atomic_write(&self.root.join("index.json"), &bytes)?;
        Ok(entries)
    }

    pub fn annotations(&self) -> AnnotationLog {
        AnnotationLog::new(self.root.join("annotations.jsonl"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{run_episode, EpisodeConfig};
    use crate::sim::{bundled_tasks, OraclePolicy, ScriptedPolicy, SimEnv};

    fn trace(i: usize) -> Trace {
        let task = &bundled_tasks()[i];
        run_episode(
            task,
            &mut SimEnv::new(),
            &mut OraclePolicy::new(task),
            &EpisodeConfig::default(),
        )
    }

    #[test]
    fn save_load_round_trip_and_bytes_stable() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::open(dir.path()).unwrap();
        let t = trace(0);
        let id = store.save_trace(&t).unwrap();
        assert_eq!(id, t.trace_id);
        let back = store.load_trace(&id).unwrap();
        assert_eq!(back, t);
        assert_eq!(encode_trace(&back), store.load_bytes(&id).unwrap());
    }

    #[test]
    fn raw_bytes_preserved() {
        let task = &bundled_tasks()[0];
        let mut p = ScriptedPolicy::new(["garbage \u{1F600}\t\"quoted\"\r\nno action"]);
        let t = run_episode(task, &mut SimEnv::new(), &mut p, &EpisodeConfig::new(2, 5));
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::open(dir.path()).unwrap();
        let id = store.save_trace(&t).unwrap();
        assert_eq!(
            store.load_trace(&id).unwrap().steps[0].raw_policy_output,
            t.steps[0].raw_policy_output
        );
    }

    #[test]
    fn unknown_id_and_bad_version() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::open(dir.path()).unwrap();
        assert!(matches!(
            store.load_trace("abcdef0123456789"),
            Err(StoreError::NotFound(_))
        ));
        assert!(matches!(
            store.load_trace("../etc"),
            Err(StoreError::NotFound(_))
        ));
        let text = String::from_utf8(encode_trace(&trace(0))).unwrap();
        let bumped = text.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
        assert!(matches!(
            decode_trace(bumped.as_bytes()),
            Err(StoreError::SchemaVersionMismatch { found: 2, .. })
        ));
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = String::from_utf8(encode_trace(&trace(0))).unwrap();
        let extra = text.replacen("{", "{\n  \"extra\": 1,", 1);
        assert!(matches!(
            decode_trace(extra.as_bytes()),
            Err(StoreError::CorruptRecord(_))
        ));
    }

    #[test]
    fn saving_never_rewrites() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::open(dir.path()).unwrap();
        let t = trace(1);
        let id = store.save_trace(&t).unwrap();
        let before = fs::metadata(store.path_for(&id).unwrap())
            .unwrap()
            .modified()
            .unwrap();
        store.save_trace(&t).unwrap();
        let after = fs::metadata(store.path_for(&id).unwrap())
            .unwrap()
            .modified()
            .unwrap();
        assert_eq!(before, after);
        let mut wrong = t.clone();
        wrong.trace_id = "00".repeat(8);
        assert!(matches!(
            store.save_trace(&wrong),
            Err(StoreError::IdMismatch { .. })
        ));
    }

    #[test]
    fn index_lists_sorted_ids() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::open(dir.path()).unwrap();
        for i in 0..3 {
            store.save_trace(&trace(i)).unwrap();
        }
        let idx = store.rebuild_index().unwrap();
        assert_eq!(idx.len(), 3);
        assert!(idx.windows(2).all(|w| w[0].trace_id < w[1].trace_id));
        assert!(dir.path().join("index.json").exists());
    }
}
