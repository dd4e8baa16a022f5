//! Thought augmentation for action-only traces.
//!
//! Two routes: reverse annotation, where an annotator writes the thought for a
//! step already knowing the action taken, and bootstrapping, where a policy is
//! sampled until it proposes the recorded action and its thought is kept.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::agent::{
    parse_policy_output, window_context, PolicyClient, PromptContext, Step, Trace, DEFAULT_WINDOW,
};
use crate::eval::action_match;
use crate::hashing::derive_seed;
use crate::sim::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningPattern {
    TaskDecomposition,
    LongTermConsistency,
    MilestoneRecognition,
    TrialAndError,
    Reflection,
}

impl ReasoningPattern {
    pub const ALL: [ReasoningPattern; 5] = [
        ReasoningPattern::TaskDecomposition,
        ReasoningPattern::LongTermConsistency,
        ReasoningPattern::MilestoneRecognition,
        ReasoningPattern::TrialAndError,
        ReasoningPattern::Reflection,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ReasoningPattern::TaskDecomposition => "task_decomposition",
            ReasoningPattern::LongTermConsistency => "long_term_consistency",
            ReasoningPattern::MilestoneRecognition => "milestone_recognition",
            ReasoningPattern::TrialAndError => "trial_and_error",
            ReasoningPattern::Reflection => "reflection",
        }
    }

    /// Reads the `[pattern]` tag at the start of a thought, if any.
    pub fn from_tag(thought: &str) -> Option<ReasoningPattern> {
        let rest = thought.trim_start().strip_prefix('[')?;
        let end = rest.find(']')?;
        rest[..end].parse().ok()
    }
}

impl fmt::Display for ReasoningPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReasoningPattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown reasoning pattern `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    #[default]
    En,
    Zh,
}

impl FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "en" => Ok(Language::En),
            "zh" => Ok(Language::Zh),
            _ => Err(format!("unknown language `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub max_try: usize,
    pub language: Language,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            max_try: 16,
            language: Language::En,
        }
    }
}

impl BootstrapConfig {
    pub fn new(max_try: usize, language: Language) -> Result<Self, AugmentError> {
        if max_try == 0 {
            return Err(AugmentError::Config("max_try must be at least 1".into()));
        }
        Ok(Self { max_try, language })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnnotatorError {
    #[error("annotator transport failed: {0}")]
    Transport(String),
    #[error("annotator returned an unusable answer: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AugmentError {
    #[error("annotator failed at step {step} after {attempts} attempts: {source}")]
    AnnotatorFailure {
        step: usize,
        attempts: usize,
        source: AnnotatorError,
    },
    #[error("bad configuration: {0}")]
    Config(String),
}

/// A generated thought, optionally tagged with the pattern it follows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub thought: String,
    pub pattern: Option<ReasoningPattern>,
}

/// Writes thoughts. `target` is the action the thought must lead to, when known.
pub trait AnnotatorClient: Send {
    fn id(&self) -> String;

    fn annotate(
        &mut self,
        ctx: &PromptContext,
        target: Option<&Action>,
        language: Language,
    ) -> Result<Annotation, AnnotatorError>;
}

/// Offline annotator producing templated thoughts tagged with a pattern.
/// Phrasing is picked from the seed and the context, so output is fixed for a
/// fixed seed.
#[derive(Debug, Clone)]
pub struct ScriptedAnnotator {
    seed: u64,
    /// Fail this many calls before answering, for retry tests.
    fail_first: usize,
}

impl ScriptedAnnotator {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            fail_first: 0,
        }
    }

    pub fn failing_first(mut self, n: usize) -> Self {
        self.fail_first = n;
        self
    }
}

fn pick_pattern(ctx: &PromptContext, target: Option<&Action>) -> ReasoningPattern {
    let prev = ctx.history.last().map(|h| &h.action);
    match target {
        _ if ctx.history.is_empty() => ReasoningPattern::TaskDecomposition,
        Some(Action::Finished) => ReasoningPattern::MilestoneRecognition,
        Some(Action::Scroll(..)) => ReasoningPattern::TrialAndError,
        Some(a) if prev == Some(a) => ReasoningPattern::Reflection,
        _ => ReasoningPattern::LongTermConsistency,
    }
}

fn describe(ctx: &PromptContext, target: Option<&Action>) -> String {
    let Some(action) = target else {
        return "decide what to do next".to_string();
    };
    let label = action
        .target_point()
        .and_then(|p| ctx.current_observation().hit_test(p))
        .map(|e| format!(" on \"{}\"", e.text))
        .unwrap_or_default();
    format!("perform {}{label}", action.kind())
}

impl AnnotatorClient for ScriptedAnnotator {
    fn id(&self) -> String {
        format!("scripted-annotator:{}", self.seed)
    }

    fn annotate(
        &mut self,
        ctx: &PromptContext,
        target: Option<&Action>,
        language: Language,
    ) -> Result<Annotation, AnnotatorError> {
        if self.fail_first > 0 {
            self.fail_first -= 1;
            return Err(AnnotatorError::Transport("scripted failure".into()));
        }
        let pattern = pick_pattern(ctx, target);
        let what = describe(ctx, target);
        let variant = derive_seed(self.seed, &[&ctx.state_key()]) % 2;
        let body = match (language, variant) {
            (Language::En, 0) => format!("Working on \"{}\", I should {what}.", ctx.instruction),
            (Language::En, _) => format!(
                "To make progress on \"{}\", I will {what}.",
                ctx.instruction
            ),
            (Language::Zh, 0) => format!("为了完成「{}」，我需要 {what}。", ctx.instruction),
            (Language::Zh, _) => format!("接下来针对「{}」，我会 {what}。", ctx.instruction),
        };
        let recall = match ctx.history.last().and_then(|h| h.thought.as_deref()) {
            Some(prev) => format!(" (after: {})", prev.chars().take(48).collect::<String>()),
            None => String::new(),
        };
        Ok(Annotation {
            thought: format!("[{pattern}] {body}{recall}"),
            pattern: Some(pattern),
        })
    }
}

/// Annotates every step of `trace` in order. Each step's prompt carries the
/// thoughts already generated for the earlier steps and the step's own known
/// action. Existing thoughts are replaced; actions and observations are
/// untouched. On failure nothing is returned, so a partial result never
/// reaches the store.
pub fn actre_annotate(
    trace: &Trace,
    client: &mut dyn AnnotatorClient,
    retries: usize,
    language: Language,
) -> Result<Trace, AugmentError> {
    let window = trace
        .metadata
        .get("window")
        .and_then(|w| w.parse().ok())
        .filter(|&w: &usize| w >= 1)
        .unwrap_or(DEFAULT_WINDOW);
    let mut done: Vec<Step> = Vec::with_capacity(trace.steps.len());
    for step in &trace.steps {
        let ctx = window_context(
            &trace.instruction,
            trace.platform,
            &done,
            &step.observation,
            window,
        );
        let mut attempts = 0;
        let annotation = loop {
            attempts += 1;
            match client.annotate(&ctx, Some(&step.action), language) {
                Ok(a) => break a,
                Err(e) if attempts > retries => {
                    return Err(AugmentError::AnnotatorFailure {
                        step: step.step_index,
                        attempts,
                        source: e,
                    })
                }
                Err(_) => {}
            }
        };
        let mut s = step.clone();
        s.thought = Some(annotation.thought);
        done.push(s);
    }
    if trace.steps.is_empty() {
        return Ok(trace.clone());
    }
    let mut out = trace.clone();
    out.steps = done;
    out.metadata.insert("augment".into(), "actre".into());
    out.metadata.insert("annotator".into(), client.id());
    Ok(out.with_content_id())
}

/// Samples up to `max_try` answers from `policy` and returns the thought and
/// action of the first whose action matches `gold`. Coordinates match when
/// both points fall in `gold_box`, if one is given.
pub fn bootstrap_thought(
    ctx: &PromptContext,
    policy: &mut dyn PolicyClient,
    gold: &Action,
    gold_box: Option<&BBox>,
    cfg: &BootstrapConfig,
) -> Option<(String, Action)> {
    for _ in 0..cfg.max_try {
        let Ok(raw) = policy.respond(ctx) else {
            continue;
        };
        let Ok(out) = parse_policy_output(&raw) else {
            continue;
        };
        let Ok(action) = out.action_line.parse::<Action>() else {
            continue;
        };
        if action_match(&action, gold, gold_box).is_correct() {
            return Some((out.thought.unwrap_or_default(), action));
        }
    }
    None
}

/// Result of bootstrapping thoughts for a whole trace.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOutcome {
    pub trace: Trace,
    /// Steps for which no sample matched; they keep their previous thought.
    pub unmatched: Vec<usize>,
}

/// Bootstraps a thought for every step. The gold box is the element under the
/// recorded action's point. The recorded action is kept even when a sampled
/// action matched only by box.
pub fn bootstrap_trace(
    trace: &Trace,
    policy: &mut dyn PolicyClient,
    cfg: &BootstrapConfig,
) -> Trace {
    bootstrap_trace_detailed(trace, policy, cfg).trace
}

pub fn bootstrap_trace_detailed(
    trace: &Trace,
    policy: &mut dyn PolicyClient,
    cfg: &BootstrapConfig,
) -> BootstrapOutcome {
    let window = trace
        .metadata
        .get("window")
        .and_then(|w| w.parse().ok())
        .filter(|&w: &usize| w >= 1)
        .unwrap_or(DEFAULT_WINDOW);
    let mut done: Vec<Step> = Vec::with_capacity(trace.steps.len());
    let mut unmatched = Vec::new();
    for step in &trace.steps {
        let ctx = window_context(
            &trace.instruction,
            trace.platform,
            &done,
            &step.observation,
            window,
        );
        let gold_box = step
            .action
            .target_point()
            .and_then(|p| step.observation.hit_test(p))
            .map(|e| e.bbox);
        let mut s = step.clone();
        match bootstrap_thought(&ctx, policy, &step.action, gold_box.as_ref(), cfg) {
            Some((thought, _)) => s.thought = Some(thought),
            None => unmatched.push(step.step_index),
        }
        done.push(s);
    }
    let mut out = trace.clone();
    out.steps = done;
    out.metadata.insert("augment".into(), "bootstrap".into());
    BootstrapOutcome {
        trace: out.with_content_id(),
        unmatched,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{run_episode, EpisodeConfig, PolicyError};
    use crate::sim::{bundled_tasks, OraclePolicy, ScriptedPolicy, SimEnv};

    fn oracle_trace(task_id: &str, thoughts: bool) -> Trace {
        let task = bundled_tasks()
            .into_iter()
            .find(|t| t.task_id == task_id)
            .unwrap();
        let mut p = OraclePolicy::new(&task);
        if !thoughts {
            p = p.without_thoughts();
        }
        run_episode(&task, &mut SimEnv::new(), &mut p, &EpisodeConfig::default())
    }

    struct Recording {
        inner: ScriptedAnnotator,
        seen: Vec<PromptContext>,
    }

    impl AnnotatorClient for Recording {
        fn id(&self) -> String {
            "recording".into()
        }
        fn annotate(
            &mut self,
            ctx: &PromptContext,
            target: Option<&Action>,
            language: Language,
        ) -> Result<Annotation, AnnotatorError> {
            self.seen.push(ctx.clone());
            self.inner.annotate(ctx, target, language)
        }
    }

    #[test]
    fn actre_feeds_earlier_thoughts_forward() {
        let trace = oracle_trace("browser_bookmark", false);
        assert!(trace.len() >= 2);
        let mut rec = Recording {
            inner: ScriptedAnnotator::new(1),
            seen: Vec::new(),
        };
        let out = actre_annotate(&trace, &mut rec, 0, Language::En).unwrap();
        assert!(out.steps.iter().all(|s| s.thought.is_some()));
        assert_eq!(rec.seen[1].history[0].thought, out.steps[0].thought);
        for (a, b) in trace.steps.iter().zip(&out.steps) {
            assert_eq!(a.action, b.action);
            assert_eq!(a.observation, b.observation);
        }
        assert!(ReasoningPattern::from_tag(out.steps[0].thought.as_ref().unwrap()).is_some());
    }

    #[test]
    fn actre_replaces_existing_thoughts_and_is_deterministic() {
        let trace = oracle_trace("form_single", true);
        let a = actre_annotate(&trace, &mut ScriptedAnnotator::new(5), 0, Language::En).unwrap();
        let b = actre_annotate(&trace, &mut ScriptedAnnotator::new(5), 0, Language::En).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.steps[0].thought, trace.steps[0].thought);
    }

    #[test]
    fn actre_on_empty_trace_is_identity() {
        let mut trace = oracle_trace("form_single", false);
        trace.steps.clear();
        let out = actre_annotate(&trace, &mut ScriptedAnnotator::new(1), 0, Language::En).unwrap();
        assert_eq!(out, trace);
    }

    #[test]
    fn actre_retries_then_fails() {
        let trace = oracle_trace("form_single", false);
        let ok = actre_annotate(
            &trace,
            &mut ScriptedAnnotator::new(1).failing_first(2),
            2,
            Language::En,
        );
        assert!(ok.is_ok());
        let err = actre_annotate(
            &trace,
            &mut ScriptedAnnotator::new(1).failing_first(3),
            2,
            Language::En,
        );
        assert!(matches!(
            err,
            Err(AugmentError::AnnotatorFailure { attempts: 3, .. })
        ));
    }

    struct Counting<P> {
        inner: P,
        calls: usize,
    }

    impl<P: PolicyClient> PolicyClient for Counting<P> {
        fn id(&self) -> String {
            "counting".into()
        }
        fn respond(&mut self, ctx: &PromptContext) -> Result<String, PolicyError> {
            self.calls += 1;
            self.inner.respond(ctx)
        }
    }

    fn any_ctx() -> PromptContext {
        let task = bundled_tasks().remove(0);
        let obs = SimEnv::new().reset(&task).unwrap();
        window_context(&task.instruction, task.platform, &[], &obs, 5)
    }

    #[test]
    fn bootstrap_takes_first_match() {
        let mut p = Counting {
            inner: ScriptedPolicy::new(["Thought: done\nAction: Finished()"]),
            calls: 0,
        };
        let got = bootstrap_thought(
            &any_ctx(),
            &mut p,
            &Action::Finished,
            None,
            &BootstrapConfig::default(),
        );
        assert_eq!(got, Some(("done".to_string(), Action::Finished)));
        assert_eq!(p.calls, 1);
    }

    #[test]
    fn bootstrap_exhausts_after_max_try() {
        let mut p = Counting {
            inner: ScriptedPolicy::waiting(),
            calls: 0,
        };
        let cfg = BootstrapConfig::new(7, Language::En).unwrap();
        assert_eq!(
            bootstrap_thought(&any_ctx(), &mut p, &Action::Finished, None, &cfg),
            None
        );
        assert_eq!(p.calls, 7);
    }

    #[test]
    fn bootstrap_matches_by_box() {
        let bx = BBox::new(0.1, 0.1, 0.3, 0.3).unwrap();
        let mut p = ScriptedPolicy::new(["Thought: near\nAction: Click(0.1100, 0.2900)"]);
        let gold = Action::click(0.2, 0.2);
        let got = bootstrap_thought(
            &any_ctx(),
            &mut p,
            &gold,
            Some(&bx),
            &BootstrapConfig::default(),
        );
        assert!(got.is_some());
        let mut p = ScriptedPolicy::new(["Thought: near\nAction: Click(0.1100, 0.2900)"]);
        assert!(
            bootstrap_thought(&any_ctx(), &mut p, &gold, None, &BootstrapConfig::default())
                .is_none()
        );
    }

    #[test]
    fn zero_max_try_rejected() {
        assert!(BootstrapConfig::new(0, Language::En).is_err());
    }

    #[test]
    fn pattern_tags_parse() {
        for p in ReasoningPattern::ALL {
            assert_eq!(ReasoningPattern::from_tag(&format!("[{p}] text")), Some(p));
        }
        assert_eq!(ReasoningPattern::from_tag("no tag"), None);
    }
}
