//! Policies backed by the simulator: the scripted oracle, a noisy wrapper and a
//! fixed script.

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SimEnv, Task};
use crate::action::{Action, ActionKind, NormPoint, PlatformProfile, ScrollDirection};
use crate::agent::{
    format_policy_output, parse_policy_output, PolicyClient, PolicyError, PolicyProvider,
    PromptContext,
};
use crate::hashing::derive_seed;

/// The scripted expert. It only sees the prompt context, so it rebuilds the
/// true state by replaying the action history on a private simulator.
pub struct OraclePolicy {
    task: Task,
    env: SimEnv,
    applied: Vec<Action>,
    thoughts: bool,
}

impl OraclePolicy {
    pub fn new(task: &Task) -> Self {
        Self {
            task: task.clone(),
            env: SimEnv::new(),
            applied: Vec::new(),
            thoughts: true,
        }
    }

    /// Emit bare actions without thoughts.
    pub fn without_thoughts(mut self) -> Self {
        self.thoughts = false;
        self
    }

    fn sync(&mut self, ctx: &PromptContext) -> Result<(), PolicyError> {
        let history: Vec<&Action> = ctx.history.iter().map(|h| &h.action).collect();
        let is_prefix = self.applied.len() <= history.len()
            && self.applied.iter().zip(&history).all(|(a, b)| a == *b);
        if !is_prefix || self.env.task().is_none() {
            self.env
                .reset(&self.task)
                .map_err(|e| PolicyError::Internal(e.to_string()))?;
            self.applied.clear();
        }
        for a in &history[self.applied.len()..] {
            self.env
                .apply_action(a)
                .map_err(|e| PolicyError::Internal(e.to_string()))?;
            self.applied.push((*a).clone());
        }
        Ok(())
    }
}

impl PolicyClient for OraclePolicy {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn respond(&mut self, ctx: &PromptContext) -> Result<String, PolicyError> {
        self.sync(ctx)?;
        let done = self
            .env
            .check_goal()
            .map_err(|e| PolicyError::Internal(e.to_string()))?;
        let step = if done {
            self.env.completion_step()
        } else {
            self.env
                .oracle_action()
                .map_err(|e| PolicyError::Internal(e.to_string()))?
        };
        let thought = self.thoughts.then_some(step.thought.as_str());
        Ok(format_policy_output(thought, &step.action))
    }
}

pub struct OracleProvider {
    thoughts: bool,
}

impl OracleProvider {
    pub fn new() -> Self {
        Self { thoughts: true }
    }

    pub fn without_thoughts() -> Self {
        Self { thoughts: false }
    }
}

impl Default for OracleProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl PolicyProvider for OracleProvider {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn policy_for(&self, task: &Task, _seed: u64) -> Box<dyn PolicyClient> {
        let p = OraclePolicy::new(task);
        Box::new(if self.thoughts {
            p
        } else {
            p.without_thoughts()
        })
    }
}

const TYPE_WORDS: &[&str] = &["hello", "test", "kitten.png", "SAVE10", "x"];
const HOTKEYS: &[&str] = &[
    "ctrl+a",
    "ctrl+c",
    "ctrl+v",
    "ctrl+shift+t",
    "alt+left",
    "enter",
    "esc",
];

/// A uniformly drawn action kind from `profile` with random arguments.
pub fn random_action(rng: &mut impl Rng, profile: &PlatformProfile) -> Action {
    let kinds: Vec<ActionKind> = profile.kinds().collect();
    let kind = *kinds.choose(rng).expect("profiles are non-empty");
    let point = |rng: &mut dyn rand::RngCore| {
        let x = rng.random_range(0..=10_000u32) as f64 / 10_000.0;
        let y = rng.random_range(0..=10_000u32) as f64 / 10_000.0;
        NormPoint::new(x, y).expect("grid point in range")
    };
    match kind {
        ActionKind::Click => Action::Click(point(rng)),
        ActionKind::Drag => {
            let a = point(rng);
            Action::Drag(a, point(rng))
        }
        ActionKind::Scroll => {
            let p = point(rng);
            Action::Scroll(p, *ScrollDirection::ALL.choose(rng).expect("non-empty"))
        }
        ActionKind::Type => Action::Type(TYPE_WORDS.choose(rng).expect("non-empty").to_string()),
        ActionKind::Hotkey => Action::Hotkey(HOTKEYS.choose(rng).expect("non-empty").to_string()),
        ActionKind::Wait => Action::Wait,
        ActionKind::Finished => Action::Finished,
        ActionKind::CallUser => Action::CallUser,
        ActionKind::LeftDouble => Action::LeftDouble(point(rng)),
        ActionKind::RightSingle => Action::RightSingle(point(rng)),
        ActionKind::LongPress => Action::LongPress(point(rng)),
        ActionKind::PressBack => Action::PressBack,
        ActionKind::PressHome => Action::PressHome,
        ActionKind::PressEnter => Action::PressEnter,
    }
}

/// Wraps a policy and, with probability `p` per step, swaps its action for a
/// random valid one. The inner thought is kept.
pub struct NoisyPolicy {
    inner: Box<dyn PolicyClient>,
    p: f64,
    rng: ChaCha8Rng,
    profile: PlatformProfile,
}

impl NoisyPolicy {
    pub fn new(inner: Box<dyn PolicyClient>, p: f64, seed: u64, profile: PlatformProfile) -> Self {
        assert!(
            (0.0..=1.0).contains(&p),
            "noise probability must be in [0, 1]"
        );
        Self {
            inner,
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            profile,
        }
    }
}

impl PolicyClient for NoisyPolicy {
    fn id(&self) -> String {
        format!("noisy({}, p={})", self.inner.id(), self.p)
    }

    fn respond(&mut self, ctx: &PromptContext) -> Result<String, PolicyError> {
        let raw = self.inner.respond(ctx)?;
        if !self.rng.random_bool(self.p) {
            return Ok(raw);
        }
        let thought = parse_policy_output(&raw).ok().and_then(|o| o.thought);
        let action = random_action(&mut self.rng, &self.profile);
        Ok(format_policy_output(thought.as_deref(), &action))
    }
}

pub struct NoisyProvider {
    inner: Arc<dyn PolicyProvider>,
    p: f64,
}

impl NoisyProvider {
    pub fn new(inner: Arc<dyn PolicyProvider>, p: f64) -> Self {
        assert!(
            (0.0..=1.0).contains(&p),
            "noise probability must be in [0, 1]"
        );
        Self { inner, p }
    }

    pub fn noise(&self) -> f64 {
        self.p
    }
}

impl PolicyProvider for NoisyProvider {
    fn id(&self) -> String {
        format!("noisy({}, p={})", self.inner.id(), self.p)
    }

    fn policy_for(&self, task: &Task, seed: u64) -> Box<dyn PolicyClient> {
        let inner = self.inner.policy_for(task, derive_seed(seed, &["inner"]));
        Box::new(NoisyPolicy::new(
            inner,
            self.p,
            derive_seed(seed, &["noise"]),
            PlatformProfile::new(task.platform),
        ))
    }
}

/// Replays fixed outputs in order and then repeats the last one.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    outputs: Vec<String>,
    next: usize,
}

impl ScriptedPolicy {
    pub fn new<S: Into<String>>(outputs: impl IntoIterator<Item = S>) -> Self {
        let outputs: Vec<String> = outputs.into_iter().map(Into::into).collect();
        assert!(
            !outputs.is_empty(),
            "a scripted policy needs at least one output"
        );
        Self { outputs, next: 0 }
    }

    /// A policy that waits forever.
    pub fn waiting() -> Self {
        Self::new(["Action: Wait()"])
    }
}

impl PolicyClient for ScriptedPolicy {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn respond(&mut self, _ctx: &PromptContext) -> Result<String, PolicyError> {
        let i = self.next.min(self.outputs.len() - 1);
        self.next += 1;
        Ok(self.outputs[i].clone())
    }
}
