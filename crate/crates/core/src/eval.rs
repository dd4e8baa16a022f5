//! Step-level matching metrics and task-level benchmark runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rayon::prelude::*;

use crate::action::{normalize_hotkey, Action, NormPoint};
use crate::agent::{
    run_episode, EpisodeConfig, PolicyProvider, Termination, Trace, DEFAULT_BUDGET, DEFAULT_WINDOW,
};
use crate::hashing::derive_seed;
use crate::sim::{BBox, SimEnv, Task};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("runs must be at least 1")]
    NoRuns,
    #[error("best-of-N needs N >= 1")]
    ZeroN,
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepJudgement {
    pub type_match: bool,
    pub args_match: bool,
    pub grounding_hit: Option<bool>,
}

impl StepJudgement {
    pub fn is_correct(&self) -> bool {
        self.type_match && self.args_match
    }
}

/// Closed-box hit test.
pub fn grounding_hit(p: NormPoint, bbox: &BBox) -> bool {
    bbox.contains(p)
}

fn point_match(pred: NormPoint, gold: NormPoint, gold_box: Option<&BBox>) -> bool {
    match gold_box {
        Some(b) => grounding_hit(pred, b),
        None => pred.same_at_precision(&gold),
    }
}

/// Judges a predicted action against the gold one. Coordinates are checked by
/// box membership when the gold element box is known and at wire precision
/// otherwise. For `Drag` the box applies to the start point; the end point is
/// always compared at wire precision.
pub fn action_match(pred: &Action, gold: &Action, gold_box: Option<&BBox>) -> StepJudgement {
    let type_match = pred.kind() == gold.kind();
    let grounding_hit = match (pred.target_point(), gold_box) {
        (Some(p), Some(b)) => Some(grounding_hit(p, b)),
        _ => None,
    };
    let args_match = type_match
        && match (pred, gold) {
            (Action::Type(a), Action::Type(b)) => a == b,
            (Action::Hotkey(a), Action::Hotkey(b)) => normalize_hotkey(a) == normalize_hotkey(b),
            (Action::Scroll(p, d), Action::Scroll(g, gd)) => {
                d == gd && point_match(*p, *g, gold_box)
            }
            (Action::Drag(p0, p1), Action::Drag(g0, g1)) => {
                point_match(*p0, *g0, gold_box) && p1.same_at_precision(g1)
            }
            (Action::Click(p), Action::Click(g))
            | (Action::LeftDouble(p), Action::LeftDouble(g))
            | (Action::RightSingle(p), Action::RightSingle(g))
            | (Action::LongPress(p), Action::LongPress(g)) => point_match(*p, *g, gold_box),
            _ => true,
        };
    StepJudgement {
        type_match,
        args_match,
        grounding_hit,
    }
}

/// One gold step with the box of the element it targets, when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldStep {
    pub action: Action,
    #[serde(default)]
    pub bbox: Option<BBox>,
}

/// Gold steps from a reference trace; each box is the element under the
/// recorded action's point.
pub fn gold_steps(trace: &Trace) -> Vec<GoldStep> {
    trace
        .steps
        .iter()
        .map(|s| GoldStep {
            action: s.action.clone(),
            bbox: s
                .action
                .target_point()
                .and_then(|p| s.observation.hit_test(p))
                .map(|e| e.bbox),
        })
        .collect()
}

/// Teacher-forced step success rate. Step `i` of `pred` is judged against
/// step `i` of `gold`; steps present on only one side count as wrong.
pub fn step_success_rate(pred: &[Action], gold: &[GoldStep]) -> f64 {
    let total = pred.len().max(gold.len());
    if total == 0 {
        return 1.0;
    }
    let correct = pred
        .iter()
        .zip(gold)
        .filter(|(p, g)| action_match(p, &g.action, g.bbox.as_ref()).is_correct())
        .count();
    correct as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub budget: usize,
    pub window: usize,
    pub runs: usize,
    pub seed: u64,
    /// Reseed the environment per run; when false every run uses the task's
    /// own seed and only the policy sampling varies.
    pub vary_env_seed: bool,
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            window: DEFAULT_WINDOW,
            runs: 3,
            seed: 0,
            vary_env_seed: true,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub successes: Vec<bool>,
    pub terminations: Vec<Termination>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub policy_id: String,
    pub tasks: Vec<TaskResult>,
    pub success_rate: f64,
    pub runs: usize,
    pub budget: usize,
    pub n_bon: Option<usize>,
}

impl BenchReport {
    pub fn successes(&self) -> usize {
        self.tasks
            .iter()
            .flat_map(|t| &t.successes)
            .filter(|s| **s)
            .count()
    }
}

/// Outcome of one task episode as the benchmark scores it.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub trace: Trace,
    pub success: bool,
}

/// Runs one episode on a fresh environment. Success needs both the goal
/// checker and a `Finished` termination; everything else is a failure.
pub fn run_task_episode(
    task: &Task,
    provider: &dyn PolicyProvider,
    policy_seed: u64,
    cfg: &EpisodeConfig,
) -> EpisodeOutcome {
    let mut env = SimEnv::new();
    let mut policy = provider.policy_for(task, policy_seed);
    let cfg = cfg.clone().with_meta("policy_seed", policy_seed);
    let trace = run_episode(task, &mut env, policy.as_mut(), &cfg);
    let success = trace.termination == Termination::Finished && env.check_goal().unwrap_or(false);
    EpisodeOutcome { trace, success }
}

pub(crate) fn with_pool<T: Send>(
    workers: usize,
    f: impl FnOnce() -> T + Send,
) -> Result<T, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Every task `runs` times. Results are ordered by task then run regardless
/// of scheduling.
pub fn run_benchmark(
    tasks: &[Task],
    provider: &dyn PolicyProvider,
    cfg: &BenchConfig,
) -> Result<BenchReport, EvalError> {
    if cfg.runs == 0 {
        return Err(EvalError::NoRuns);
    }
    if cfg.budget == 0 {
        return Err(EvalError::ZeroBudget);
    }
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|t| (0..cfg.runs).map(move |r| (t, r)))
        .collect();
    let outcomes: Vec<(bool, Termination)> = with_pool(cfg.workers, || {
        jobs.par_iter()
            .map(|&(t, r)| {
                let base = &tasks[t];
                let run = r.to_string();
                let task = if cfg.vary_env_seed && r > 0 {
                    base.with_seed(derive_seed(base.seed, &["run", &run]))
                } else {
                    base.clone()
                };
                let seed = derive_seed(cfg.seed, &[&base.task_id, "run", &run]);
                let ep = EpisodeConfig::new(cfg.budget, cfg.window).with_meta("run", r);
                let out = run_task_episode(&task, provider, seed, &ep);
                (out.success, out.trace.termination)
            })
            .collect()
    })?;
    let mut results = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let chunk = &outcomes[t * cfg.runs..(t + 1) * cfg.runs];
        results.push(TaskResult {
            task_id: task.task_id.clone(),
            successes: chunk.iter().map(|o| o.0).collect(),
            terminations: chunk.iter().map(|o| o.1).collect(),
        });
    }
    let total = tasks.len() * cfg.runs;
    let wins = outcomes.iter().filter(|o| o.0).count();
    Ok(BenchReport {
        policy_id: provider.id(),
        tasks: results,
        success_rate: if total == 0 {
            0.0
        } else {
            wins as f64 / total as f64
        },
        runs: cfg.runs,
        budget: cfg.budget,
        n_bon: None,
    })
}

/// Seed of the `i`-th best-of-N sample. Sample sets for smaller N are
/// prefixes of those for larger N.
pub fn bon_seed(seed: u64, task: &Task, i: usize) -> u64 {
    derive_seed(
        seed,
        &[&task.task_id, &task.seed.to_string(), "bon", &i.to_string()],
    )
}

/// Per-sample successes of the first `n` best-of-N episodes.
pub fn bon_outcomes(
    task: &Task,
    provider: &dyn PolicyProvider,
    n: usize,
    budget: usize,
    window: usize,
    seed: u64,
) -> Vec<bool> {
    let ep = EpisodeConfig::new(budget, window);
    (0..n)
        .map(|i| run_task_episode(task, provider, bon_seed(seed, task, i), &ep).success)
        .collect()
}

/// Any-of-N success over `n` independently seeded episodes.
pub fn best_of_n(
    task: &Task,
    provider: &dyn PolicyProvider,
    n: usize,
    budget: usize,
    window: usize,
    seed: u64,
) -> Result<bool, EvalError> {
    if n == 0 {
        return Err(EvalError::ZeroN);
    }
    let ep = EpisodeConfig::new(budget, window);
    Ok((0..n).any(|i| run_task_episode(task, provider, bon_seed(seed, task, i), &ep).success))
}

/// Best-of-N over a suite, one entry per task.
pub fn best_of_n_report(
    tasks: &[Task],
    provider: &dyn PolicyProvider,
    n: usize,
    cfg: &BenchConfig,
) -> Result<BenchReport, EvalError> {
    if n == 0 {
        return Err(EvalError::ZeroN);
    }
    let wins: Vec<bool> = with_pool(cfg.workers, || {
        tasks
            .par_iter()
            .map(|t| best_of_n(t, provider, n, cfg.budget, cfg.window, cfg.seed).unwrap_or(false))
            .collect()
    })?;
    let rate = if tasks.is_empty() {
        0.0
    } else {
        wins.iter().filter(|w| **w).count() as f64 / tasks.len() as f64
    };
    Ok(BenchReport {
        policy_id: provider.id(),
        tasks: tasks
            .iter()
            .zip(&wins)
            .map(|(t, w)| TaskResult {
                task_id: t.task_id.clone(),
                successes: vec![*w],
                terminations: Vec::new(),
            })
            .collect(),
        success_rate: rate,
        runs: 1,
        budget: cfg.budget,
        n_bon: Some(n),
    })
}
