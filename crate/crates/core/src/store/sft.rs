//! Supervised samples with loss masks.
//!
//! Every step becomes one sample whose context is the windowed prompt the
//! policy saw. Steps marked erroneous stay in the data as context for later
//! steps but get `loss_mask = false`; everything else trains.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::agent::{window_context, PromptContext, Step, Trace, DEFAULT_WINDOW};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SftError {
    #[error("mark references step {step_index} of trace `{trace_id}`, which does not exist")]
    DanglingCorrection { trace_id: String, step_index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRole {
    /// A known mistake kept only as context.
    Erroneous,
    /// A reviewer-supplied replacement step.
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StepMark {
    pub trace_id: String,
    pub step_index: usize,
    pub role: StepRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub trace_id: String,
    pub step_index: usize,
    pub context: PromptContext,
    pub target_thought: Option<String>,
    pub target_action: Action,
    pub loss_mask: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SftOptions {
    pub window: usize,
    /// Also emit a thought-free copy of every step that has a thought.
    pub include_vanilla: bool,
}

impl Default for SftOptions {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            include_vanilla: false,
        }
    }
}

fn strip_thoughts(steps: &[Step]) -> Vec<Step> {
    steps
        .iter()
        .map(|s| Step {
            thought: None,
            ..s.clone()
        })
        .collect()
}

/// One sample per step, in trace order. A mark naming a missing trace or step
/// is an error.
pub fn export_sft(
    traces: &[Trace],
    marks: &[StepMark],
    opts: &SftOptions,
) -> Result<Vec<SftSample>, SftError> {
    let by_id: BTreeMap<&str, &Trace> = traces.iter().map(|t| (t.trace_id.as_str(), t)).collect();
    let mut erroneous = BTreeSet::new();
    for m in marks {
        let ok = by_id
            .get(m.trace_id.as_str())
            .is_some_and(|t| m.step_index < t.len());
        if !ok {
            return Err(SftError::DanglingCorrection {
                trace_id: m.trace_id.clone(),
                step_index: m.step_index,
            });
        }
        if m.role == StepRole::Erroneous {
            erroneous.insert((m.trace_id.as_str(), m.step_index));
        }
    }
    let mut out = Vec::new();
    for t in traces {
        let vanilla = opts.include_vanilla.then(|| strip_thoughts(&t.steps));
        for (i, s) in t.steps.iter().enumerate() {
            let loss_mask = !erroneous.contains(&(t.trace_id.as_str(), i));
            out.push(SftSample {
                trace_id: t.trace_id.clone(),
                step_index: i,
                context: window_context(
                    &t.instruction,
                    t.platform,
                    &t.steps[..i],
                    &s.observation,
                    opts.window,
                ),
                target_thought: s.thought.clone(),
                target_action: s.action.clone(),
                loss_mask,
            });
            if let (Some(plain), Some(_)) = (&vanilla, &s.thought) {
                out.push(SftSample {
                    trace_id: t.trace_id.clone(),
                    step_index: i,
                    context: window_context(
                        &t.instruction,
                        t.platform,
                        &plain[..i],
                        &s.observation,
                        opts.window,
                    ),
                    target_thought: None,
                    target_action: s.action.clone(),
                    loss_mask,
                });
            }
        }
    }
    Ok(out)
}
