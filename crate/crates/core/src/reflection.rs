//! Preference pairs from corrected traces.
//!
//! Two kinds. An error-correction pair branches at the wrong step itself: the
//! state is everything before it, the rejected branch is what the agent did
//! and the chosen branch is the correction. A post-reflection pair keeps the
//! mistake in the state and branches at the following step, where the chosen
//! branch is a recovery that acknowledges the mistake.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, ActionError, Platform, PlatformProfile};
use crate::agent::{format_policy_output, window_context, PromptContext, Step, Termination, Trace};
use crate::eval::action_match;
use crate::filter::task_for;
use crate::sim::{Observation, OracleStep, SimEnv, SimError, Task, TaskRegistry};
use crate::store::{StepMark, StepRole};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReflectionError {
    #[error("step index {index} out of bounds for a trace of {len} steps")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("chosen and rejected actions are identical")]
    IdenticalPair,
    #[error("correction is for trace `{correction}`, not `{trace}`")]
    TraceMismatch { correction: String, trace: String },
    #[error("corrected action not valid here: {0}")]
    InvalidAction(#[from] ActionError),
    #[error("replay failed: {0}")]
    Replay(#[from] SimError),
    #[error("malformed preference file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionKind {
    ErrorCorrection,
    PostReflection,
}

/// A reviewer's fix. For `error_correction`, `step_index` is the wrong step.
/// For `post_reflection` it is the step right after the wrong one, so it must
/// be at least 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Correction {
    pub trace_id: String,
    pub step_index: usize,
    pub corrected_thought: String,
    pub corrected_action: Action,
    pub kind: CorrectionKind,
}

impl Correction {
    /// The check shared by the HTTP service and pair construction.
    pub fn validate(&self, trace: &Trace) -> Result<(), ReflectionError> {
        if self.trace_id != trace.trace_id {
            return Err(ReflectionError::TraceMismatch {
                correction: self.trace_id.clone(),
                trace: trace.trace_id.clone(),
            });
        }
        PlatformProfile::new(trace.platform).check(&self.corrected_action)?;
        let min = match self.kind {
            CorrectionKind::ErrorCorrection => 0,
            CorrectionKind::PostReflection => 1,
        };
        if self.step_index < min || self.step_index >= trace.len() {
            return Err(ReflectionError::IndexOutOfBounds {
                index: self.step_index,
                len: trace.len(),
            });
        }
        if trace.steps[self.step_index].action.canonical() == self.corrected_action.canonical() {
            return Err(ReflectionError::IdenticalPair);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub thought: Option<String>,
    pub action: Action,
}

/// Shared state of both branches: the full history before the divergence
/// step and the observation at it.
#[derive(Debug, Clone, PartialEq)]
pub struct PairState {
    pub instruction: String,
    pub platform: Platform,
    pub history: Vec<Step>,
    pub observation: Observation,
}

impl PairState {
    pub fn context(&self, window: usize) -> PromptContext {
        window_context(
            &self.instruction,
            self.platform,
            &self.history,
            &self.observation,
            window,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub kind: CorrectionKind,
    pub trace_id: String,
    /// Index of the divergence step.
    pub step_index: usize,
    pub state: PairState,
    pub rejected: Branch,
    pub chosen: Branch,
}

fn pair_at(trace: &Trace, c: &Correction) -> PreferencePair {
    let i = c.step_index;
    PreferencePair {
        kind: c.kind,
        trace_id: trace.trace_id.clone(),
        step_index: i,
        state: PairState {
            instruction: trace.instruction.clone(),
            platform: trace.platform,
            history: trace.steps[..i].to_vec(),
            observation: trace.steps[i].observation.clone(),
        },
        rejected: Branch {
            thought: trace.steps[i].thought.clone(),
            action: trace.steps[i].action.clone(),
        },
        chosen: Branch {
            thought: Some(c.corrected_thought.clone()),
            action: c.corrected_action.clone(),
        },
    }
}

fn expect_kind(c: &Correction, kind: CorrectionKind) -> Result<(), ReflectionError> {
    if c.kind == kind {
        Ok(())
    } else {
        Err(ReflectionError::Format(format!(
            "expected a {kind:?} correction, got {:?}",
            c.kind
        )))
    }
}

pub fn build_error_correction_pair(
    trace: &Trace,
    c: &Correction,
) -> Result<PreferencePair, ReflectionError> {
    expect_kind(c, CorrectionKind::ErrorCorrection)?;
    c.validate(trace)?;
    Ok(pair_at(trace, c))
}

/// The state keeps the erroneous step exactly as recorded.
pub fn build_post_reflection_pair(
    trace: &Trace,
    c: &Correction,
) -> Result<PreferencePair, ReflectionError> {
    expect_kind(c, CorrectionKind::PostReflection)?;
    c.validate(trace)?;
    Ok(pair_at(trace, c))
}

/// Builds the pair of the correction's own kind.
pub fn build_pair(trace: &Trace, c: &Correction) -> Result<PreferencePair, ReflectionError> {
    match c.kind {
        CorrectionKind::ErrorCorrection => build_error_correction_pair(trace, c),
        CorrectionKind::PostReflection => build_post_reflection_pair(trace, c),
    }
}

/// The corrected trace used for supervised export, with its step marks. An
/// error correction replaces the wrong step and ends there. A post-reflection
/// correction keeps the wrong step (masked out) and replaces the one after it.
pub fn corrected_trace(
    trace: &Trace,
    c: &Correction,
) -> Result<(Trace, Vec<StepMark>), ReflectionError> {
    c.validate(trace)?;
    let i = c.step_index;
    let mut t = trace.clone();
    t.steps.truncate(i);
    t.steps.push(Step {
        step_index: i,
        observation: trace.steps[i].observation.clone(),
        thought: Some(c.corrected_thought.clone()),
        action: c.corrected_action.clone(),
        raw_policy_output: format_policy_output(Some(&c.corrected_thought), &c.corrected_action),
    });
    t.termination = if c.corrected_action == Action::Finished {
        Termination::Finished
    } else {
        Termination::Truncated
    };
    t.metadata
        .insert("corrected_from".into(), trace.trace_id.clone());
    t.metadata.remove("final_digest");
    let t = t.with_content_id();
    let mut marks = vec![StepMark {
        trace_id: t.trace_id.clone(),
        step_index: i,
        role: StepRole::Corrected,
    }];
    if c.kind == CorrectionKind::PostReflection {
        marks.insert(
            0,
            StepMark {
                trace_id: t.trace_id.clone(),
                step_index: i - 1,
                role: StepRole::Erroneous,
            },
        );
    }
    Ok((t, marks))
}

/// Replays the pair's history and checks every recorded digest, including
/// the observation at the divergence step.
pub fn verify_pair_prefix(pair: &PreferencePair, task: &Task) -> Result<bool, ReflectionError> {
    let mut env = SimEnv::new();
    let mut obs = env.reset(task)?;
    for s in &pair.state.history {
        if obs.digest != s.observation.digest {
            return Ok(false);
        }
        obs = env.apply_action(&s.action)?;
    }
    Ok(obs.digest == pair.state.observation.digest)
}

fn oracle_after(task: &Task, actions: &[Action]) -> Result<OracleStep, SimError> {
    let mut env = SimEnv::new();
    env.reset(task)?;
    for a in actions {
        env.apply_action(a)?;
    }
    if env.check_goal()? {
        Ok(env.completion_step())
    } else {
        env.oracle_action()
    }
}

/// Index of the first step where the trace leaves the oracle's path, judged
/// with box-tolerant matching against the oracle's target element.
pub fn first_deviation(trace: &Trace, task: &Task) -> Result<Option<usize>, SimError> {
    let mut env = SimEnv::new();
    env.reset(task)?;
    for (i, s) in trace.steps.iter().enumerate() {
        let expected = if env.check_goal()? {
            env.completion_step()
        } else {
            env.oracle_action()?
        };
        let obs = env.observe()?;
        let gold_box = expected
            .action
            .target_point()
            .and_then(|p| obs.hit_test(p))
            .map(|e| e.bbox);
        if !action_match(&s.action, &expected.action, gold_box.as_ref()).is_correct() {
            return Ok(Some(i));
        }
        env.apply_action(&s.action)?;
    }
    Ok(None)
}

/// Offline corrector: finds the first deviation and asks the oracle for the
/// fix. Returns `None` when the trace never deviates, when a post-reflection
/// pair has no following step, or when the recovery equals what the agent
/// already did.
pub fn scripted_correction(
    trace: &Trace,
    registry: &TaskRegistry,
    kind: CorrectionKind,
) -> Result<Option<Correction>, ReflectionError> {
    let Some(task) = task_for(trace, registry) else {
        return Ok(None);
    };
    let Some(tau) = first_deviation(trace, &task)? else {
        return Ok(None);
    };
    let at = match kind {
        CorrectionKind::ErrorCorrection => tau,
        CorrectionKind::PostReflection => tau + 1,
    };
    if at >= trace.len() {
        return Ok(None);
    }
    let actions: Vec<Action> = trace.steps[..at].iter().map(|s| s.action.clone()).collect();
    let fix = oracle_after(&task, &actions)?;
    if fix.action.canonical() == trace.steps[at].action.canonical() {
        return Ok(None);
    }
    Ok(Some(Correction {
        trace_id: trace.trace_id.clone(),
        step_index: at,
        corrected_thought: fix.thought,
        corrected_action: fix.action,
        kind,
    }))
}

pub const DPO_FORMAT: &str = "uniact-dpo";
pub const DPO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoHeader {
    pub format: String,
    pub version: u32,
    pub window: usize,
    pub count: usize,
}

/// One line of a preference file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoRecord {
    pub kind: CorrectionKind,
    pub trace_id: String,
    pub step_index: usize,
    /// Hash of `context`; the toy policy's state key.
    pub state_key: String,
    pub context: PromptContext,
    pub chosen: Branch,
    pub rejected: Branch,
}

impl DpoRecord {
    pub fn from_pair(pair: &PreferencePair, window: usize) -> Self {
        let context = pair.state.context(window);
        Self {
            kind: pair.kind,
            trace_id: pair.trace_id.clone(),
            step_index: pair.step_index,
            state_key: context.state_key(),
            context,
            chosen: pair.chosen.clone(),
            rejected: pair.rejected.clone(),
        }
    }
}

/// A header line followed by one record per pair.
pub fn emit_dpo_dataset(pairs: &[PreferencePair], window: usize) -> String {
    let header = DpoHeader {
        format: DPO_FORMAT.into(),
        version: DPO_VERSION,
        window,
        count: pairs.len(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for p in pairs {
        out.push_str(
            &serde_json::to_string(&DpoRecord::from_pair(p, window)).expect("record serializes"),
        );
        out.push('\n');
    }
    out
}

pub fn read_dpo_dataset(text: &str) -> Result<(DpoHeader, Vec<DpoRecord>), ReflectionError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: DpoHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| ReflectionError::Format("empty file".into()))?,
    )
    .map_err(|e| ReflectionError::Format(format!("header: {e}")))?;
    if header.format != DPO_FORMAT || header.version != DPO_VERSION {
        return Err(ReflectionError::Format(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let records: Vec<DpoRecord> = lines
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| ReflectionError::Format(format!("record {}: {e}", i + 1)))
        })
        .collect::<Result<_, _>>()?;
    if records.len() != header.count {
        return Err(ReflectionError::Format(format!(
            "header promises {} records, found {}",
            header.count,
            records.len()
        )));
    }
    Ok((header, records))
}
