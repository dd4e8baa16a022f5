//! The episode loop: observe, build a windowed prompt context, ask the policy,
//! parse its answer into a unified action, act, and repeat until the policy
//! finishes, asks for the user, or the step budget runs out.
//!
//! The prompt keeps every earlier thought and action but only the most recent
//! observations: with a window of `N`, the policy sees the current screen plus
//! the screens of the last `N - 1` steps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{parse_action, Action, Platform, PlatformProfile};
use crate::sim::{Observation, SimEnv, SimError, Task};

pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_BUDGET: usize = 15;
/// The longer budget used for harder suites.
pub const LONG_BUDGET: usize = 50;

pub const THOUGHT_MARKER: &str = "Thought:";
pub const ACTION_MARKER: &str = "Action:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("policy output has no `Action:` marker")]
    MissingAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("policy transport failed: {0}")]
    Transport(String),
    #[error("policy returned an empty response")]
    Empty,
    #[error("policy failed: {0}")]
    Internal(String),
}

/// How an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Finished,
    CallUser,
    BudgetExhausted,
    EnvError,
    /// Cut to a valid prefix by human review.
    Truncated,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Finished => "finished",
            Termination::CallUser => "call_user",
            Termination::BudgetExhausted => "budget_exhausted",
            Termination::EnvError => "env_error",
            Termination::Truncated => "truncated",
        }
    }

    /// Episodes that end by asking the user or running out of steps are scored
    /// as infeasible, i.e. failures.
    pub fn is_infeasible(&self) -> bool {
        !matches!(self, Termination::Finished)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub step_index: usize,
    pub observation: Observation,
    pub thought: Option<String>,
    pub action: Action,
    pub raw_policy_output: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub trace_id: String,
    pub instruction: String,
    pub platform: Platform,
    pub steps: Vec<Step>,
    pub termination: Termination,
    pub metadata: BTreeMap<String, String>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn task_id(&self) -> Option<&str> {
        self.metadata.get("task_id").map(String::as_str)
    }

    pub fn task_seed(&self) -> Option<u64> {
        self.metadata.get("task_seed").and_then(|s| s.parse().ok())
    }

    /// Content hash of everything but the id itself.
    pub fn content_id(&self) -> String {
        crate::store::content_id(self)
    }

    /// Sets `trace_id` to the content hash.
    pub fn with_content_id(mut self) -> Self {
        self.trace_id = self.content_id();
        self
    }

    /// Digest of the screen after the last action, when recorded.
    pub fn final_digest(&self) -> Option<&str> {
        self.metadata.get("final_digest").map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryEntry {
    pub thought: Option<String>,
    pub action: Action,
}

/// Everything the policy sees for one decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptContext {
    pub instruction: String,
    pub platform: Platform,
    pub window: usize,
    /// Thought and action of every prior step, oldest first.
    pub history: Vec<HistoryEntry>,
    /// Step index of `observations[0]`.
    pub first_observed_step: usize,
    /// The windowed prior observations followed by the current one.
    pub observations: Vec<Observation>,
}

impl PromptContext {
    pub fn current_observation(&self) -> &Observation {
        self.observations
            .last()
            .expect("context holds the current observation")
    }

    /// Index of the step being decided.
    pub fn step_index(&self) -> usize {
        self.history.len()
    }

    /// Stable key of the decision state: hash of the canonical JSON form.
    pub fn state_key(&self) -> String {
        crate::hashing::short_hash(&serde_json::to_vec(self).expect("context serializes"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("context serializes")
    }
}

/// Builds the prompt context for the next decision. Keeps all prior
/// (thought, action) pairs but only the last `window - 1` prior observations,
/// plus `current`.
pub fn window_context(
    instruction: &str,
    platform: Platform,
    history: &[Step],
    current: &Observation,
    window: usize,
) -> PromptContext {
    assert!(window >= 1, "observation window must be at least 1");
    let keep = (window - 1).min(history.len());
    let first = history.len() - keep;
    let mut observations: Vec<Observation> = history[first..]
        .iter()
        .map(|s| s.observation.clone())
        .collect();
    observations.push(current.clone());
    PromptContext {
        instruction: instruction.to_string(),
        platform,
        window,
        history: history
            .iter()
            .map(|s| HistoryEntry {
                thought: s.thought.clone(),
                action: s.action.clone(),
            })
            .collect(),
        first_observed_step: first,
        observations,
    }
}

/// Policy output split into its optional thought and its action line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyOutput {
    pub thought: Option<String>,
    pub action_line: String,
}

/// Splits raw policy text on the `Thought:` and `Action:` markers. The action
/// line is whatever follows the last `Action:` up to the end of that line.
pub fn parse_policy_output(text: &str) -> Result<PolicyOutput, AgentError> {
    let at = text.rfind(ACTION_MARKER).ok_or(AgentError::MissingAction)?;
    let action_line = text[at + ACTION_MARKER.len()..]
        .trim_start()
        .lines()
        .next()
        .unwrap_or("")
        .trim()
        .to_string();
    let head = &text[..at];
    let thought = head.rfind(THOUGHT_MARKER).and_then(|t| {
        let s = head[t + THOUGHT_MARKER.len()..].trim();
        (!s.is_empty()).then(|| s.to_string())
    });
    Ok(PolicyOutput {
        thought,
        action_line,
    })
}

/// Formats a policy answer in the marker syntax the loop parses.
pub fn format_policy_output(thought: Option<&str>, action: &Action) -> String {
    match thought {
        Some(t) => format!("{THOUGHT_MARKER} {t}\n{ACTION_MARKER} {action}"),
        None => format!("{ACTION_MARKER} {action}"),
    }
}

/// A decision maker: a model endpoint, a scripted expert, a replay cache...
pub trait PolicyClient: Send {
    fn id(&self) -> String;

    /// One answer for `ctx`. Stochastic policies draw a fresh sample per call.
    fn respond(&mut self, ctx: &PromptContext) -> Result<String, PolicyError>;
}

/// Creates per-episode policy instances. `seed` fixes any sampling.
pub trait PolicyProvider: Send + Sync {
    fn id(&self) -> String;
    fn policy_for(&self, task: &Task, seed: u64) -> Box<dyn PolicyClient>;
}

/// The environment protocol the loop drives.
pub trait Environment {
    fn reset(&mut self, task: &Task) -> Result<Observation, SimError>;
    fn apply_action(&mut self, action: &Action) -> Result<Observation, SimError>;
    fn check_goal(&self) -> Result<bool, SimError>;
}

impl Environment for SimEnv {
    fn reset(&mut self, task: &Task) -> Result<Observation, SimError> {
        SimEnv::reset(self, task)
    }

    fn apply_action(&mut self, action: &Action) -> Result<Observation, SimError> {
        SimEnv::apply_action(self, action)
    }

    fn check_goal(&self) -> Result<bool, SimError> {
        SimEnv::check_goal(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeConfig {
    pub budget: usize,
    pub window: usize,
    /// Extra metadata copied into the trace.
    pub metadata: BTreeMap<String, String>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            window: DEFAULT_WINDOW,
            metadata: BTreeMap::new(),
        }
    }
}

impl EpisodeConfig {
    pub fn new(budget: usize, window: usize) -> Self {
        Self {
            budget,
            window,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }
}

/// Runs one episode of `task` and returns the full trace.
///
/// Malformed or disallowed policy output does not abort the episode: the step
/// is recorded with its raw text and a `Wait()` is executed instead, leaving
/// trace quality to the filtering stages.
pub fn run_episode(
    task: &Task,
    env: &mut dyn Environment,
    policy: &mut dyn PolicyClient,
    cfg: &EpisodeConfig,
) -> Trace {
    assert!(cfg.budget >= 1, "step budget must be at least 1");
    let mut metadata = cfg.metadata.clone();
    metadata.insert("task_id".into(), task.task_id.clone());
    metadata.insert("task_seed".into(), task.seed.to_string());
    metadata.insert("app".into(), task.app.clone());
    metadata.insert("policy_id".into(), policy.id());
    metadata.insert("budget".into(), cfg.budget.to_string());
    metadata.insert("window".into(), cfg.window.to_string());

    let finish = |steps: Vec<Step>, termination, metadata| {
        Trace {
            trace_id: String::new(),
            instruction: task.instruction.clone(),
            platform: task.platform,
            steps,
            termination,
            metadata,
        }
        .with_content_id()
    };

    let mut current = match env.reset(task) {
        Ok(obs) => obs,
        Err(e) => {
            metadata.insert("error".into(), e.to_string());
            return finish(Vec::new(), Termination::EnvError, metadata);
        }
    };
    let profile = PlatformProfile::new(task.platform);
    let mut steps: Vec<Step> = Vec::new();
    let mut termination = Termination::BudgetExhausted;
    let mut malformed = 0usize;

    for index in 0..cfg.budget {
        let ctx = window_context(
            &task.instruction,
            task.platform,
            &steps,
            &current,
            cfg.window,
        );
        let raw = match policy.respond(&ctx) {
            Ok(raw) if !raw.trim().is_empty() => raw,
            Ok(_) => {
                metadata.insert("error".into(), PolicyError::Empty.to_string());
                termination = Termination::EnvError;
                break;
            }
            Err(e) => {
                metadata.insert("error".into(), e.to_string());
                termination = Termination::EnvError;
                break;
            }
        };
        let (thought, action) = match parse_policy_output(&raw) {
            Ok(out) => match parse_action(&out.action_line, &profile) {
                Ok(a) => (out.thought, a),
                Err(_) => {
                    malformed += 1;
                    (out.thought, Action::Wait)
                }
            },
            Err(_) => {
                malformed += 1;
                (None, Action::Wait)
            }
        };
        steps.push(Step {
            step_index: index,
            observation: current.clone(),
            thought,
            action: action.clone(),
            raw_policy_output: raw,
        });
        match env.apply_action(&action) {
            Ok(obs) => current = obs,
            Err(e) => {
                metadata.insert("error".into(), e.to_string());
                termination = Termination::EnvError;
                break;
            }
        }
        match action {
            Action::Finished => {
                termination = Termination::Finished;
                break;
            }
            Action::CallUser => {
                termination = Termination::CallUser;
                break;
            }
            _ => {}
        }
    }
    if termination != Termination::EnvError {
        metadata.insert("final_digest".into(), current.digest.clone());
    }
    if malformed > 0 {
        metadata.insert("malformed_steps".into(), malformed.to_string());
    }
    finish(steps, termination, metadata)
}
