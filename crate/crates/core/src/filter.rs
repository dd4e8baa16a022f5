//! Multi-stage trace filtering: replayed rule checks, scorer thresholding and
//! human-review truncation, with one audit chain per input trace.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Termination, Trace};
use crate::eval::with_pool;
use crate::hashing::unit_hash;
use crate::sim::{SimEnv, SimError, Task, TaskRegistry};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("replay diverged at step {step}: recorded digest {recorded}, replayed {replayed}")]
    ReplayMismatch {
        step: usize,
        recorded: String,
        replayed: String,
    },
    #[error("scorer failed: {0}")]
    ScorerFailure(String),
    #[error("step index {index} out of bounds for a trace of {len} steps")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("annotation is for trace `{annotation}`, not `{trace}`")]
    TraceMismatch { annotation: String, trace: String },
    #[error("replay failed: {0}")]
    Replay(#[from] SimError),
    #[error("bad configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Rule,
    Score,
    Review,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Keep,
    Drop,
    Truncate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub stage: Stage,
    pub decision: Decision,
    pub truncate_at: Option<usize>,
    pub reason: String,
    pub score: Option<f64>,
}

impl FilterVerdict {
    fn keep(stage: Stage, reason: impl Into<String>) -> Self {
        Self {
            stage,
            decision: Decision::Keep,
            truncate_at: None,
            reason: reason.into(),
            score: None,
        }
    }

    fn drop(stage: Stage, reason: impl Into<String>) -> Self {
        Self {
            decision: Decision::Drop,
            ..Self::keep(stage, reason)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewVerdict {
    Truncate,
    Drop,
    Keep,
}

/// A reviewer's judgement of one trace. `error_step` is the 0-based index of
/// the first wrong step; truncation keeps the steps before it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewAnnotation {
    pub trace_id: String,
    pub error_step: usize,
    pub verdict: ReviewVerdict,
    pub annotator: String,
    #[serde(default)]
    pub note: String,
}

impl ReviewAnnotation {
    /// The check shared by the HTTP service and the pipeline.
    pub fn validate(&self, trace: &Trace) -> Result<(), FilterError> {
        if self.trace_id != trace.trace_id {
            return Err(FilterError::TraceMismatch {
                annotation: self.trace_id.clone(),
                trace: trace.trace_id.clone(),
            });
        }
        if self.verdict == ReviewVerdict::Truncate && self.error_step >= trace.len() {
            return Err(FilterError::IndexOutOfBounds {
                index: self.error_step,
                len: trace.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleConfig {
    /// Identical no-effect actions in a row that count as redundant.
    pub repeat: usize,
    /// Equal trailing digests that mark a stuck loop.
    pub stuck: usize,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            repeat: 3,
            stuck: 3,
        }
    }
}

/// Looks up the task a trace was generated from, using its metadata.
pub fn task_for(trace: &Trace, registry: &TaskRegistry) -> Option<Task> {
    let task = registry.get(trace.task_id()?).ok()?;
    Some(match trace.task_seed() {
        Some(seed) => task.with_seed(seed),
        None => task.clone(),
    })
}

/// Digests of the observation before each step plus the one after the last
/// step. With a task the trace is re-executed and every recorded digest must
/// agree; without one the recorded digests are used as they are.
pub fn replay_digests(trace: &Trace, task: Option<&Task>) -> Result<Vec<String>, FilterError> {
    let mut recorded: Vec<Option<&str>> = trace
        .steps
        .iter()
        .map(|s| Some(s.observation.digest.as_str()))
        .collect();
    recorded.push(trace.final_digest());
    let Some(task) = task else {
        return Ok(recorded.into_iter().flatten().map(str::to_string).collect());
    };
    let mut env = SimEnv::new();
    let mut replayed = vec![env.reset(task)?.digest];
    for s in &trace.steps {
        replayed.push(env.apply_action(&s.action)?.digest);
    }
    for (step, (r, p)) in recorded.iter().zip(&replayed).enumerate() {
        if let Some(r) = r {
            if r != p {
                return Err(FilterError::ReplayMismatch {
                    step,
                    recorded: r.to_string(),
                    replayed: p.clone(),
                });
            }
        }
    }
    Ok(replayed)
}

/// Drops traces with `repeat` identical actions in a row that each leave the
/// screen unchanged, and budget-exhausted traces whose last `stuck` digests
/// are equal.
pub fn rule_filter(
    trace: &Trace,
    task: Option<&Task>,
    cfg: &RuleConfig,
) -> Result<FilterVerdict, FilterError> {
    let digests = replay_digests(trace, task)?;
    let mut run = 0usize;
    for (i, s) in trace.steps.iter().enumerate() {
        let no_effect = digests.get(i + 1).is_some_and(|after| *after == digests[i]);
        let same_as_prev = i > 0 && trace.steps[i - 1].action.canonical() == s.action.canonical();
        run = match (no_effect, same_as_prev) {
            (false, _) => 0,
            (true, true) if run > 0 => run + 1,
            (true, _) => 1,
        };
        if cfg.repeat > 0 && run >= cfg.repeat {
            return Ok(FilterVerdict::drop(
                Stage::Rule,
                format!("redundant actions: {run} identical no-effect steps ending at step {i}"),
            ));
        }
    }
    if trace.termination == Termination::BudgetExhausted
        && cfg.stuck > 0
        && digests.len() >= cfg.stuck
    {
        let tail = &digests[digests.len() - cfg.stuck..];
        if tail.iter().all(|d| *d == tail[0]) {
            return Ok(FilterVerdict::drop(
                Stage::Rule,
                format!("stuck loop: last {} observations identical", cfg.stuck),
            ));
        }
    }
    Ok(FilterVerdict::keep(Stage::Rule, "rules passed"))
}

/// Rates a trace in [0, 1].
pub trait ScorerClient: Send + Sync {
    fn id(&self) -> String;
    fn score(&self, instruction: &str, trace: &Trace) -> Result<f64, FilterError>;
}

/// Replays the trace and scores 1 when it finishes with the goal met, else
/// `low`. Traces without a known task get `low`.
#[derive(Debug, Clone)]
pub struct ScriptedScorer {
    registry: TaskRegistry,
    low: f64,
}

impl ScriptedScorer {
    pub fn new(registry: TaskRegistry) -> Self {
        Self { registry, low: 0.1 }
    }
}

impl ScorerClient for ScriptedScorer {
    fn id(&self) -> String {
        "scripted-scorer".into()
    }

    fn score(&self, _instruction: &str, trace: &Trace) -> Result<f64, FilterError> {
        let Some(task) = task_for(trace, &self.registry) else {
            return Ok(self.low);
        };
        if trace.termination != Termination::Finished {
            return Ok(self.low);
        }
        let mut env = SimEnv::new();
        env.reset(&task)?;
        for s in &trace.steps {
            env.apply_action(&s.action)?;
        }
        Ok(if env.check_goal()? { 1.0 } else { self.low })
    }
}

/// A scorer backed by a closure.
pub struct FnScorer<F>(pub F);

impl<F> ScorerClient for FnScorer<F>
where
    F: Fn(&str, &Trace) -> Result<f64, FilterError> + Send + Sync,
{
    fn id(&self) -> String {
        "fn-scorer".into()
    }

    fn score(&self, instruction: &str, trace: &Trace) -> Result<f64, FilterError> {
        (self.0)(instruction, trace)
    }
}

fn check_threshold(threshold: f64) -> Result<(), FilterError> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(())
    } else {
        Err(FilterError::Config(format!(
            "threshold {threshold} outside [0, 1]"
        )))
    }
}

/// Keeps the trace when its score reaches `threshold`; ties keep.
pub fn score_filter(
    trace: &Trace,
    scorer: &dyn ScorerClient,
    threshold: f64,
) -> Result<FilterVerdict, FilterError> {
    check_threshold(threshold)?;
    let score = scorer.score(&trace.instruction, trace)?;
    if !(0.0..=1.0).contains(&score) {
        return Err(FilterError::ScorerFailure(format!(
            "score {score} outside [0, 1]"
        )));
    }
    let mut v = if score >= threshold {
        FilterVerdict::keep(Stage::Score, format!("score {score} >= {threshold}"))
    } else {
        FilterVerdict::drop(Stage::Score, format!("score {score} < {threshold}"))
    };
    v.score = Some(score);
    Ok(v)
}

/// Result of applying a review.
#[derive(Debug, Clone, PartialEq)]
pub enum ReviewOutcome {
    Keep(Trace),
    Truncated(Trace),
    Drop,
}

/// Cuts `trace` to the steps before `error_step` on a truncate verdict. An
/// empty prefix drops the trace.
pub fn apply_review(trace: &Trace, ann: &ReviewAnnotation) -> Result<ReviewOutcome, FilterError> {
    ann.validate(trace)?;
    Ok(match ann.verdict {
        ReviewVerdict::Keep => ReviewOutcome::Keep(trace.clone()),
        ReviewVerdict::Drop => ReviewOutcome::Drop,
        ReviewVerdict::Truncate if ann.error_step == 0 => ReviewOutcome::Drop,
        ReviewVerdict::Truncate => ReviewOutcome::Truncated(truncate(trace, ann.error_step)),
    })
}

/// The first `keep` steps of `trace` as a new trace marked `truncated`.
pub fn truncate(trace: &Trace, keep: usize) -> Trace {
    let mut t = trace.clone();
    let next_digest = t.steps[keep].observation.digest.clone();
    t.steps.truncate(keep);
    t.termination = Termination::Truncated;
    t.metadata
        .insert("truncated_from".into(), trace.trace_id.clone());
    t.metadata.insert("final_digest".into(), next_digest);
    t.with_content_id()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub rules: RuleConfig,
    pub threshold: f64,
    /// Share of traces routed to review, selected by id hash.
    pub review_fraction: f64,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rules: RuleConfig::default(),
            threshold: 0.5,
            review_fraction: 1.0,
            workers: 1,
        }
    }
}

/// The audit record of one input trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictChain {
    pub trace_id: String,
    pub verdicts: Vec<FilterVerdict>,
    /// Final outcome: keep, truncate, or drop (errors drop).
    pub outcome: Decision,
    /// Id of the surviving trace, which differs from `trace_id` after truncation.
    pub output_id: Option<String>,
    pub error: Option<String>,
}

fn run_one(
    trace: &Trace,
    registry: &TaskRegistry,
    scorer: &dyn ScorerClient,
    review: Option<&ReviewAnnotation>,
    cfg: &PipelineConfig,
) -> (VerdictChain, Option<Trace>) {
    let mut chain = VerdictChain {
        trace_id: trace.trace_id.clone(),
        verdicts: Vec::new(),
        outcome: Decision::Drop,
        output_id: None,
        error: None,
    };
    let task = task_for(trace, registry);
    let result = (|| -> Result<Option<Trace>, FilterError> {
        let v = rule_filter(trace, task.as_ref(), &cfg.rules)?;
        let dropped = v.decision == Decision::Drop;
        chain.verdicts.push(v);
        if dropped {
            return Ok(None);
        }
        let v = score_filter(trace, scorer, cfg.threshold)?;
        let dropped = v.decision == Decision::Drop;
        chain.verdicts.push(v);
        if dropped {
            return Ok(None);
        }
        if unit_hash(&trace.trace_id) >= cfg.review_fraction {
            chain
                .verdicts
                .push(FilterVerdict::keep(Stage::Review, "not sampled for review"));
            return Ok(Some(trace.clone()));
        }
        let Some(ann) = review else {
            chain
                .verdicts
                .push(FilterVerdict::keep(Stage::Review, "no annotation"));
            return Ok(Some(trace.clone()));
        };
        let reason = format!("review by {}", ann.annotator);
        match apply_review(trace, ann)? {
            ReviewOutcome::Keep(t) => {
                chain
                    .verdicts
                    .push(FilterVerdict::keep(Stage::Review, reason));
                Ok(Some(t))
            }
            ReviewOutcome::Drop => {
                chain
                    .verdicts
                    .push(FilterVerdict::drop(Stage::Review, reason));
                Ok(None)
            }
            ReviewOutcome::Truncated(t) => {
                chain.verdicts.push(FilterVerdict {
                    stage: Stage::Review,
                    decision: Decision::Truncate,
                    truncate_at: Some(ann.error_step),
                    reason,
                    score: None,
                });
                Ok(Some(t))
            }
        }
    })();
    match result {
        Ok(Some(t)) => {
            chain.outcome = if t.trace_id == trace.trace_id {
                Decision::Keep
            } else {
                Decision::Truncate
            };
            chain.output_id = Some(t.trace_id.clone());
            (chain, Some(t))
        }
        Ok(None) => (chain, None),
        Err(e) => {
            chain.error = Some(e.to_string());
            (chain, None)
        }
    }
}

/// Runs rule, score and review stages in order. A trace dropped by a stage
/// skips the later ones; per-trace errors drop that trace only. Output and
/// report follow input order. When a trace has several reviews the last one
/// applies.
pub fn run_pipeline(
    raw: &[Trace],
    registry: &TaskRegistry,
    scorer: &dyn ScorerClient,
    annotations: &[ReviewAnnotation],
    cfg: &PipelineConfig,
) -> Result<(Vec<Trace>, Vec<VerdictChain>), FilterError> {
    check_threshold(cfg.threshold)?;
    if !(0.0..=1.0).contains(&cfg.review_fraction) {
        return Err(FilterError::Config(format!(
            "review_fraction {} outside [0, 1]",
            cfg.review_fraction
        )));
    }
    let review_for = |id: &str| annotations.iter().rev().find(|a| a.trace_id == id);
    let results: Vec<(VerdictChain, Option<Trace>)> = with_pool(cfg.workers, || {
        raw.par_iter()
            .map(|t| run_one(t, registry, scorer, review_for(&t.trace_id), cfg))
            .collect()
    })
    .map_err(|e| FilterError::Config(e.to_string()))?;
    let mut kept = Vec::new();
    let mut report = Vec::with_capacity(results.len());
    for (chain, t) in results {
        report.push(chain);
        kept.extend(t);
    }
    Ok((kept, report))
}

/// The report as JSON lines, one chain per line.
pub fn report_jsonl(report: &[VerdictChain]) -> String {
    report
        .iter()
        .map(|c| serde_json::to_string(c).expect("chain serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{run_episode, EpisodeConfig};
    use crate::sim::{OraclePolicy, ScriptedPolicy};

    fn reg() -> TaskRegistry {
        TaskRegistry::bundled()
    }

    fn oracle(task_id: &str) -> Trace {
        let task = reg().get(task_id).unwrap().clone();
        run_episode(
            &task,
            &mut SimEnv::new(),
            &mut OraclePolicy::new(&task),
            &EpisodeConfig::default(),
        )
    }

    fn scripted(task_id: &str, outputs: &[&str], budget: usize) -> Trace {
        let task = reg().get(task_id).unwrap().clone();
        let mut p = ScriptedPolicy::new(outputs.iter().copied());
        run_episode(
            &task,
            &mut SimEnv::new(),
            &mut p,
            &EpisodeConfig::new(budget, 5),
        )
    }

    #[test]
    fn oracle_trace_passes_rules() {
        let t = oracle("files_rename");
        let task = task_for(&t, &reg());
        assert_eq!(
            rule_filter(&t, task.as_ref(), &RuleConfig::default())
                .unwrap()
                .decision,
            Decision::Keep
        );
    }

    #[test]
    fn three_identical_no_effect_clicks_drop() {
        let click = "Action: Click(0.0100, 0.9900)";
        let t = scripted(
            "form_contact",
            &[click, click, click, "Action: CallUser()"],
            10,
        );
        let v = rule_filter(&t, task_for(&t, &reg()).as_ref(), &RuleConfig::default()).unwrap();
        assert_eq!(v.decision, Decision::Drop);
        assert!(v.reason.starts_with("redundant actions"));
    }

    #[test]
    fn two_identical_no_effect_clicks_keep() {
        let click = "Action: Click(0.0100, 0.9900)";
        let t = scripted("form_contact", &[click, click, "Action: CallUser()"], 10);
        let v = rule_filter(&t, task_for(&t, &reg()).as_ref(), &RuleConfig::default()).unwrap();
        assert_eq!(v.decision, Decision::Keep);
    }

    #[test]
    fn replay_mismatch_detected() {
        let mut t = oracle("form_single");
        t.steps[1].observation = t.steps[0].observation.clone();
        let e = rule_filter(&t, task_for(&t, &reg()).as_ref(), &RuleConfig::default()).unwrap_err();
        assert!(matches!(e, FilterError::ReplayMismatch { step: 1, .. }));
    }

    #[test]
    fn score_threshold_ties_keep() {
        let t = oracle("form_single");
        for (s, d) in [
            (0.9, Decision::Keep),
            (0.5, Decision::Keep),
            (0.49, Decision::Drop),
        ] {
            let scorer = FnScorer(move |_: &str, _: &Trace| Ok(s));
            let v = score_filter(&t, &scorer, 0.5).unwrap();
            assert_eq!(v.decision, d);
            assert_eq!(v.score, Some(s));
        }
        let scorer = FnScorer(|_: &str, _: &Trace| Ok(0.7));
        assert!(score_filter(&t, &scorer, 1.5).is_err());
    }

    fn ann(t: &Trace, step: usize, verdict: ReviewVerdict) -> ReviewAnnotation {
        ReviewAnnotation {
            trace_id: t.trace_id.clone(),
            error_step: step,
            verdict,
            annotator: "r".into(),
            note: String::new(),
        }
    }

    #[test]
    fn review_truncates_to_prefix() {
        let t = oracle("settings_multi");
        assert!(t.len() >= 6);
        let ReviewOutcome::Truncated(p) =
            apply_review(&t, &ann(&t, 3, ReviewVerdict::Truncate)).unwrap()
        else {
            panic!("expected truncation");
        };
        assert_eq!(p.len(), 3);
        assert_eq!(p.termination, Termination::Truncated);
        assert_eq!(p.steps[..], t.steps[..3]);
        assert_eq!(
            apply_review(&t, &ann(&t, 0, ReviewVerdict::Truncate)).unwrap(),
            ReviewOutcome::Drop
        );
        assert_eq!(
            apply_review(&t, &ann(&t, 0, ReviewVerdict::Keep)).unwrap(),
            ReviewOutcome::Keep(t.clone())
        );
        assert!(matches!(
            apply_review(&t, &ann(&t, t.len(), ReviewVerdict::Truncate)),
            Err(FilterError::IndexOutOfBounds { .. })
        ));
    }

    #[test]
    fn truncated_trace_still_replays() {
        let t = oracle("settings_multi");
        let p = truncate(&t, 4);
        let task = task_for(&p, &reg());
        assert!(replay_digests(&p, task.as_ref()).is_ok());
    }

    #[test]
    fn pipeline_keeps_only_oracle() {
        let good = oracle("form_contact");
        let stuck = scripted("form_contact", &["Action: Wait()"], 6);
        let low = scripted(
            "browser_bookmark",
            &["Action: Click(0.3000, 0.2000)", "Action: CallUser()"],
            6,
        );
        let scorer = ScriptedScorer::new(reg());
        let (out, report) = run_pipeline(
            &[good.clone(), stuck, low],
            &reg(),
            &scorer,
            &[],
            &PipelineConfig::default(),
        )
        .unwrap();
        assert_eq!(out, vec![good]);
        assert_eq!(report.len(), 3);
        assert_eq!(report[1].verdicts.len(), 1);
        assert_eq!(report[2].verdicts.last().unwrap().stage, Stage::Score);
    }

    #[test]
    fn empty_batch() {
        let (out, report) = run_pipeline(
            &[],
            &reg(),
            &ScriptedScorer::new(reg()),
            &[],
            &PipelineConfig::default(),
        )
        .unwrap();
        assert!(out.is_empty() && report.is_empty());
    }
}
