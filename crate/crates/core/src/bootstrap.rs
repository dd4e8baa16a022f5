//! The run, filter, learn, refine loop.
//!
//! Each round runs every task of the current instruction set once, stores
//! the raw traces, filters them, hands the survivors to a learner hook that
//! yields the next policy, and lets a refiner hook pick the next instruction
//! set. A fixed held-out subset is scored before the first round and after
//! every round.
//!
//! All randomness derives from the configured seed, the round number and the
//! task, so results do not depend on worker count or scheduling.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::agent::{
    format_policy_output, EpisodeConfig, PolicyClient, PolicyError, PolicyProvider, PromptContext,
    Trace, DEFAULT_BUDGET, DEFAULT_WINDOW,
};
use crate::eval::{
    run_benchmark, run_task_episode, with_pool, BenchConfig, BenchReport, EvalError,
};
use crate::filter::{run_pipeline, FilterError, PipelineConfig, ScriptedScorer};
use crate::hashing::{derive_seed, unit_hash};
use crate::sim::{Task, TaskRegistry};
use crate::store::{StoreError, TraceStore};

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("the instruction set is empty")]
    EmptyTasks,
    #[error("at least one worker is required")]
    ZeroWorkers,
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Turns filtered traces into the next policy.
pub trait LearnerHook: Send {
    fn id(&self) -> String;
    /// Absorbs one round of filtered traces.
    fn learn(&mut self, filtered: &[Trace]);
    /// The current policy, falling back to `base` where it knows nothing.
    fn policy(&self, base: Arc<dyn PolicyProvider>) -> Arc<dyn PolicyProvider>;
    fn save_state(&self) -> serde_json::Value;
    fn load_state(&mut self, state: &serde_json::Value) -> Result<(), String>;
}

/// Picks the next instruction set.
pub trait RefinerHook: Send {
    fn id(&self) -> String;
    /// Must return a non-empty set.
    fn refine(
        &mut self,
        round: usize,
        tasks: &[Task],
        raw: &[Trace],
        filtered: &[Trace],
    ) -> Vec<Task>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Memo {
    thought: Option<String>,
    action: Action,
    /// Steps from this state to the end of the source trace.
    remaining: usize,
}

type Memory = BTreeMap<String, Memo>;

fn memo_key(instruction: &str, digest: &str) -> String {
    format!("{digest}:{instruction}")
}

/// Remembers the action taken in every state of every filtered trace, keyed
/// by instruction and screen digest. When several traces visited a state,
/// the one closest to its end wins (ties keep the earlier entry), so
/// following the memory always moves toward a recorded finish.
#[derive(Debug, Clone, Default)]
pub struct MemorizingLearner {
    memory: Memory,
}

impl MemorizingLearner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.memory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memory.is_empty()
    }
}

impl LearnerHook for MemorizingLearner {
    fn id(&self) -> String {
        "memorizing".into()
    }

    fn learn(&mut self, filtered: &[Trace]) {
        for t in filtered {
            let n = t.len();
            for (i, s) in t.steps.iter().enumerate() {
                let memo = Memo {
                    thought: s.thought.clone(),
                    action: s.action.clone(),
                    remaining: n - i,
                };
                let key = memo_key(&t.instruction, &s.observation.digest);
                match self.memory.get(&key) {
                    Some(old) if old.remaining <= memo.remaining => {}
                    _ => {
                        self.memory.insert(key, memo);
                    }
                }
            }
        }
    }

    fn policy(&self, base: Arc<dyn PolicyProvider>) -> Arc<dyn PolicyProvider> {
        Arc::new(MemorizingProvider {
            memory: Arc::new(self.memory.clone()),
            base,
        })
    }

    fn save_state(&self) -> serde_json::Value {
        serde_json::to_value(&self.memory).expect("memory serializes")
    }

    fn load_state(&mut self, state: &serde_json::Value) -> Result<(), String> {
        self.memory = serde_json::from_value(state.clone()).map_err(|e| e.to_string())?;
        Ok(())
    }
}

struct MemorizingProvider {
    memory: Arc<Memory>,
    base: Arc<dyn PolicyProvider>,
}

impl PolicyProvider for MemorizingProvider {
    fn id(&self) -> String {
        format!("memorized[{}]({})", self.memory.len(), self.base.id())
    }

    fn policy_for(&self, task: &Task, seed: u64) -> Box<dyn PolicyClient> {
        Box::new(MemorizingPolicy {
            memory: Arc::clone(&self.memory),
            base: self.base.policy_for(task, seed),
        })
    }
}

struct MemorizingPolicy {
    memory: Arc<Memory>,
    base: Box<dyn PolicyClient>,
}

impl PolicyClient for MemorizingPolicy {
    fn id(&self) -> String {
        format!("memorized({})", self.base.id())
    }

    fn respond(&mut self, ctx: &PromptContext) -> Result<String, PolicyError> {
        let key = memo_key(&ctx.instruction, &ctx.current_observation().digest);
        match self.memory.get(&key) {
            Some(m) => Ok(format_policy_output(m.thought.as_deref(), &m.action)),
            None => self.base.respond(ctx),
        }
    }
}

/// Drops tasks solved in at least `q` of their runs this round and adds a
/// reseeded variant of every unsolved base task. Unsolved tasks stay.
#[derive(Debug, Clone)]
pub struct SolvedDropRefiner {
    pub q: f64,
    registry: TaskRegistry,
}

impl SolvedDropRefiner {
    pub fn new(registry: TaskRegistry, q: f64) -> Self {
        Self { q, registry }
    }
}

fn task_key(task_id: &str, seed: u64) -> String {
    format!("{task_id}#{seed}")
}

impl RefinerHook for SolvedDropRefiner {
    fn id(&self) -> String {
        format!("solved-drop(q={})", self.q)
    }

    fn refine(
        &mut self,
        round: usize,
        tasks: &[Task],
        raw: &[Trace],
        filtered: &[Trace],
    ) -> Vec<Task> {
        let mut runs: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for t in raw {
            if let (Some(id), Some(seed)) = (t.task_id(), t.task_seed()) {
                runs.entry(task_key(id, seed)).or_default().0 += 1;
            }
        }
        for t in filtered {
            if let (Some(id), Some(seed)) = (t.task_id(), t.task_seed()) {
                runs.entry(task_key(id, seed)).or_default().1 += 1;
            }
        }
        let mut next = Vec::new();
        for task in tasks {
            let (n, ok) = runs
                .get(&task_key(&task.task_id, task.seed))
                .copied()
                .unwrap_or((0, 0));
            let solved = n > 0 && ok as f64 / n as f64 >= self.q;
            if solved || next.iter().any(|t: &Task| t == task) {
                continue;
            }
            next.push(task.clone());
            let is_base = self
                .registry
                .get(&task.task_id)
                .is_ok_and(|b| b.seed == task.seed);
            if is_base {
                next.push(task.with_seed(derive_seed(task.seed, &["variant", &round.to_string()])));
            }
        }
        if next.is_empty() {
            next = tasks.to_vec();
        }
        next
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub workers: usize,
    pub budget: usize,
    pub window: usize,
    pub seed: u64,
    pub heldout_fraction: f64,
    /// Held-out episodes per task; the environment seed stays fixed and only
    /// policy sampling varies between them.
    pub heldout_runs: usize,
    pub pipeline: PipelineConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            budget: DEFAULT_BUDGET,
            window: DEFAULT_WINDOW,
            seed: 0,
            heldout_fraction: 0.2,
            heldout_runs: 10,
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Counts and held-out scores of one finished round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub tasks: usize,
    pub raw_count: usize,
    pub filtered_count: usize,
    pub heldout_before: f64,
    pub heldout_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    /// Number of completed rounds.
    pub round: usize,
    pub tasks: Vec<Task>,
    pub heldout: Vec<Task>,
    pub policy_id: String,
    pub raw_count: usize,
    pub filtered_count: usize,
    /// Held-out report of the current policy.
    pub metrics: BenchReport,
    pub history: Vec<RoundRecord>,
}

impl IterationState {
    /// Held-out success rate before the first round, then after each round.
    pub fn heldout_curve(&self) -> Vec<f64> {
        let mut v = Vec::new();
        if let Some(first) = self.history.first() {
            v.push(first.heldout_before);
        } else {
            v.push(self.metrics.success_rate);
        }
        v.extend(self.history.iter().map(|r| r.heldout_after));
        v
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: u32,
    config: LoopConfig,
    state: IterationState,
    learner: serde_json::Value,
}

/// The held-out subset: tasks whose id hash falls below `fraction`, or the
/// single lowest-hash task when none does.
pub fn heldout_split(tasks: &[Task], fraction: f64) -> Vec<Task> {
    let mut picked: Vec<Task> = tasks
        .iter()
        .filter(|t| unit_hash(&t.task_id) < fraction)
        .cloned()
        .collect();
    if picked.is_empty() {
        if let Some(t) = tasks
            .iter()
            .min_by(|a, b| unit_hash(&a.task_id).total_cmp(&unit_hash(&b.task_id)))
        {
            picked.push(t.clone());
        }
    }
    picked
}

pub struct Orchestrator {
    pub registry: TaskRegistry,
    pub base: Arc<dyn PolicyProvider>,
    pub learner: Box<dyn LearnerHook>,
    pub refiner: Box<dyn RefinerHook>,
    pub store: TraceStore,
    pub cfg: LoopConfig,
}

impl Orchestrator {
    fn heldout_report(&self, heldout: &[Task]) -> Result<BenchReport, BootstrapError> {
        let provider = self.learner.policy(Arc::clone(&self.base));
        let cfg = BenchConfig {
            budget: self.cfg.budget,
            window: self.cfg.window,
            runs: self.cfg.heldout_runs.max(1),
            seed: derive_seed(self.cfg.seed, &["heldout"]),
            vary_env_seed: false,
            workers: self.cfg.workers,
        };
        Ok(run_benchmark(heldout, provider.as_ref(), &cfg)?)
    }

    /// Round-0 state for `tasks`.
    pub fn init(&self, tasks: Vec<Task>) -> Result<IterationState, BootstrapError> {
        if tasks.is_empty() {
            return Err(BootstrapError::EmptyTasks);
        }
        if self.cfg.workers == 0 {
            return Err(BootstrapError::ZeroWorkers);
        }
        let heldout = heldout_split(&tasks, self.cfg.heldout_fraction);
        let metrics = self.heldout_report(&heldout)?;
        Ok(IterationState {
            round: 0,
            tasks,
            heldout,
            policy_id: self.learner.policy(Arc::clone(&self.base)).id(),
            raw_count: 0,
            filtered_count: 0,
            metrics,
            history: Vec::new(),
        })
    }

    /// Runs one round and returns the next state.
    pub fn run_iteration(
        &mut self,
        state: &IterationState,
    ) -> Result<IterationState, BootstrapError> {
        if state.tasks.is_empty() {
            return Err(BootstrapError::EmptyTasks);
        }
        if self.cfg.workers == 0 {
            return Err(BootstrapError::ZeroWorkers);
        }
        let round = state.round;
        let provider = self.learner.policy(Arc::clone(&self.base));
        let ep = EpisodeConfig::new(self.cfg.budget, self.cfg.window).with_meta("round", round);
        let seed = self.cfg.seed;
        let raw: Vec<Trace> = with_pool(self.cfg.workers, || {
            state
                .tasks
                .par_iter()
                .map(|task| {
                    let s = derive_seed(
                        seed,
                        &[
                            "round",
                            &round.to_string(),
                            &task.task_id,
                            &task.seed.to_string(),
                        ],
                    );
                    run_task_episode(task, provider.as_ref(), s, &ep).trace
                })
                .collect()
        })?;
        for t in &raw {
            self.store.save_trace(t)?;
        }
        let reviews = self.store.annotations().reviews()?;
        let scorer = ScriptedScorer::new(self.registry.clone());
        let mut pipeline = self.cfg.pipeline.clone();
        pipeline.workers = self.cfg.workers;
        let (filtered, _report) = run_pipeline(&raw, &self.registry, &scorer, &reviews, &pipeline)?;
        self.learner.learn(&filtered);
        let mut tasks = self.refiner.refine(round, &state.tasks, &raw, &filtered);
        if tasks.is_empty() {
            tasks = state.tasks.clone();
        }
        let metrics = self.heldout_report(&state.heldout)?;
        let mut history = state.history.clone();
        history.push(RoundRecord {
            round,
            tasks: state.tasks.len(),
            raw_count: raw.len(),
            filtered_count: filtered.len(),
            heldout_before: state.metrics.success_rate,
            heldout_after: metrics.success_rate,
        });
        Ok(IterationState {
            round: round + 1,
            tasks,
            heldout: state.heldout.clone(),
            policy_id: self.learner.policy(Arc::clone(&self.base)).id(),
            raw_count: raw.len(),
            filtered_count: filtered.len(),
            metrics,
            history,
        })
    }

    /// Runs rounds until `state.round == until`, checkpointing after each.
    pub fn run_until(
        &mut self,
        mut state: IterationState,
        until: usize,
        checkpoint: Option<&Path>,
    ) -> Result<IterationState, BootstrapError> {
        while state.round < until {
            state = self.run_iteration(&state)?;
            if let Some(path) = checkpoint {
                self.save_checkpoint(path, &state)?;
            }
        }
        Ok(state)
    }

    pub fn save_checkpoint(
        &self,
        path: &Path,
        state: &IterationState,
    ) -> Result<(), BootstrapError> {
        let cp = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            state: state.clone(),
            learner: self.learner.save_state(),
        };
        let mut bytes = serde_json::to_vec_pretty(&cp).expect("checkpoint serializes");
        bytes.push(b'\n');
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let io = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        std::io::Write::write_all(&mut tmp, &bytes).map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    /// Restores the learner and config from `path` and returns the saved state.
    pub fn resume(&mut self, path: &Path) -> Result<IterationState, BootstrapError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BootstrapError::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
        let cp: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| BootstrapError::CorruptCheckpoint(e.to_string()))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(BootstrapError::CorruptCheckpoint(format!(
                "unsupported version {}",
                cp.version
            )));
        }
        if cp.state.tasks.is_empty() {
            return Err(BootstrapError::CorruptCheckpoint("empty task set".into()));
        }
        self.learner
            .load_state(&cp.learner)
            .map_err(BootstrapError::CorruptCheckpoint)?;
        self.cfg = cp.config;
        Ok(cp.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{NoisyProvider, OracleProvider};

    fn orchestrator(dir: &Path, workers: usize, p: f64) -> Orchestrator {
        let registry = TaskRegistry::bundled();
        Orchestrator {
            base: Arc::new(NoisyProvider::new(Arc::new(OracleProvider::new()), p)),
            learner: Box::new(MemorizingLearner::new()),
            refiner: Box::new(SolvedDropRefiner::new(registry.clone(), 0.5)),
            store: TraceStore::open(dir).unwrap(),
            registry,
            cfg: LoopConfig {
                workers,
                heldout_runs: 3,
                ..LoopConfig::default()
            },
        }
    }

    #[test]
    fn empty_task_set_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let o = orchestrator(dir.path(), 1, 0.4);
        assert!(matches!(
            o.init(Vec::new()),
            Err(BootstrapError::EmptyTasks)
        ));
    }

    #[test]
    fn heldout_split_is_fixed_and_non_empty() {
        let tasks = TaskRegistry::bundled().tasks().to_vec();
        let a = heldout_split(&tasks, 0.2);
        assert!(!a.is_empty());
        assert_eq!(a, heldout_split(&tasks, 0.2));
        assert_eq!(heldout_split(&tasks[..1], 0.0).len(), 1);
    }

    #[test]
    fn counts_are_conserved() {
        let dir = tempfile::tempdir().unwrap();
        let mut o = orchestrator(dir.path(), 2, 0.4);
        let s0 = o.init(o.registry.tasks().to_vec()).unwrap();
        let s1 = o.run_iteration(&s0).unwrap();
        assert_eq!(s1.round, 1);
        assert_eq!(s1.raw_count, s0.tasks.len());
        assert!(s1.filtered_count <= s1.raw_count);
        assert!(!s1.tasks.is_empty());
    }

    #[test]
    fn missing_checkpoint_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let mut o = orchestrator(dir.path(), 1, 0.4);
        assert!(matches!(
            o.resume(&dir.path().join("nope.json")),
            Err(BootstrapError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn memorized_trace_is_replayed() {
        let registry = TaskRegistry::bundled();
        let task = registry.get("form_contact").unwrap().clone();
        let oracle: Arc<dyn PolicyProvider> = Arc::new(OracleProvider::new());
        let ep = EpisodeConfig::default();
        let t = run_task_episode(&task, oracle.as_ref(), 1, &ep).trace;
        let mut l = MemorizingLearner::new();
        l.learn(std::slice::from_ref(&t));
        struct Waiter;
        impl PolicyProvider for Waiter {
            fn id(&self) -> String {
                "wait".into()
            }
            fn policy_for(&self, _: &Task, _: u64) -> Box<dyn PolicyClient> {
                Box::new(crate::sim::ScriptedPolicy::waiting())
            }
        }
        let p = l.policy(Arc::new(Waiter));
        let out = run_task_episode(&task, p.as_ref(), 9, &ep);
        assert!(out.success);
        let actions: Vec<_> = out.trace.steps.iter().map(|s| &s.action).collect();
        let orig: Vec<_> = t.steps.iter().map(|s| &s.action).collect();
        assert_eq!(actions, orig);
    }
}
