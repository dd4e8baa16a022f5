use std::sync::Arc;

use uniact_core::agent::EpisodeConfig;
use uniact_core::bootstrap::{LoopConfig, MemorizingLearner, Orchestrator, SolvedDropRefiner};
use uniact_core::dpo::{dpo_loss, pairs_from_records, train_toy_policy, DpoConfig, ToyPolicy};
use uniact_core::eval::run_task_episode;
use uniact_core::filter::{
    run_pipeline, Decision, PipelineConfig, ReviewAnnotation, ReviewVerdict, ScriptedScorer,
};
use uniact_core::reflection::{
    build_pair, emit_dpo_dataset, read_dpo_dataset, scripted_correction, CorrectionKind,
};
use uniact_core::sim::{NoisyProvider, OracleProvider};
use uniact_core::store::{AnnotationBody, QueueStatus, TraceStore};
use uniact_core::{TaskRegistry, Trace};

fn raw_traces() -> Vec<Trace> {
    let registry = TaskRegistry::bundled();
    let provider = NoisyProvider::new(Arc::new(OracleProvider::new()), 0.3);
    registry
        .tasks()
        .iter()
        .flat_map(|t| (0..4u64).map(move |s| t.with_seed(s)))
        .map(|t| run_task_episode(&t, &provider, t.seed, &EpisodeConfig::default()).trace)
        .collect()
}

#[test]
fn reviewed_store_flows_into_filter_pairs_and_dpo() {
    let dir = tempfile::tempdir().unwrap();
    let store = TraceStore::open(dir.path()).unwrap();
    let registry = TaskRegistry::bundled();
    for t in raw_traces() {
        store.save_trace(&t).unwrap();
    }
    let traces = store.load_all().unwrap();
    let log = store.annotations();

    // Truncate the first oracle-finished trace with at least three steps at step 2.
    let target = traces
        .iter()
        .find(|t| t.len() >= 3 && t.termination == uniact_core::Termination::Finished)
        .unwrap();
    log.append(
        &target.trace_id,
        AnnotationBody::Review(ReviewAnnotation {
            trace_id: target.trace_id.clone(),
            error_step: 2,
            verdict: ReviewVerdict::Truncate,
            annotator: "tester".into(),
            note: String::new(),
        }),
    )
    .unwrap();
    assert_eq!(
        log.status_of(&target.trace_id).unwrap(),
        QueueStatus::Annotated
    );

    let scorer = ScriptedScorer::new(registry.clone());
    let (kept, report) = run_pipeline(
        &traces,
        &registry,
        &scorer,
        &log.reviews().unwrap(),
        &PipelineConfig::default(),
    )
    .unwrap();
    let chain = report
        .iter()
        .find(|c| c.trace_id == target.trace_id)
        .unwrap();
    assert_eq!(chain.outcome, Decision::Truncate);
    let cut = kept
        .iter()
        .find(|t| Some(&t.trace_id) == chain.output_id.as_ref())
        .unwrap();
    assert_eq!(cut.len(), 2);
    assert_eq!(cut.steps[..], target.steps[..2]);

    let mut pairs = Vec::new();
    for t in &traces {
        for kind in [
            CorrectionKind::ErrorCorrection,
            CorrectionKind::PostReflection,
        ] {
            if let Some(c) = scripted_correction(t, &registry, kind).unwrap() {
                log.append(&t.trace_id, AnnotationBody::Correction(c.clone()))
                    .unwrap();
                pairs.push(build_pair(t, &c).unwrap());
            }
        }
    }
    assert!(!pairs.is_empty());
    assert_eq!(log.corrections().unwrap().len(), pairs.len());

    let text = emit_dpo_dataset(&pairs, 5);
    let (header, records) = read_dpo_dataset(&text).unwrap();
    assert_eq!(header.count, pairs.len());
    let (sft, dpo_pairs) = pairs_from_records(&records).unwrap();
    let out = train_toy_policy(&dpo_pairs, &sft, &DpoConfig::default()).unwrap();
    assert!(out.losses.windows(2).all(|w| w[1] <= w[0]));
    let before = dpo_loss(&dpo_pairs, &sft, &sft, 0.1).unwrap();
    let after = dpo_loss(&dpo_pairs, &out.policy, &sft, 0.1).unwrap();
    assert!(after < before);
    let reloaded = ToyPolicy::from_json(&out.policy.to_json()).unwrap();
    assert_eq!(reloaded, out.policy);
}

fn orchestrator(dir: &std::path::Path) -> Orchestrator {
    let registry = TaskRegistry::bundled();
    Orchestrator {
        base: Arc::new(NoisyProvider::new(Arc::new(OracleProvider::new()), 0.4)),
        learner: Box::new(MemorizingLearner::new()),
        refiner: Box::new(SolvedDropRefiner::new(registry.clone(), 0.5)),
        store: TraceStore::open(dir).unwrap(),
        registry,
        cfg: LoopConfig {
            seed: 3,
            heldout_runs: 4,
            ..LoopConfig::default()
        },
    }
}

#[test]
fn resumed_loop_matches_an_uninterrupted_one() {
    let a = tempfile::tempdir().unwrap();
    let mut straight = orchestrator(a.path());
    let s0 = straight.init(straight.registry.tasks().to_vec()).unwrap();
    let direct = straight.run_until(s0, 3, None).unwrap();

    let b = tempfile::tempdir().unwrap();
    let cp = b.path().join("loop.json");
    let mut first = orchestrator(b.path());
    let s0 = first.init(first.registry.tasks().to_vec()).unwrap();
    first.run_until(s0, 2, Some(&cp)).unwrap();
    drop(first);

    let mut second = orchestrator(b.path());
    let restored = second.resume(&cp).unwrap();
    assert_eq!(restored.round, 2);
    let resumed = second.run_until(restored, 3, Some(&cp)).unwrap();
    assert_eq!(resumed, direct);
    assert_eq!(
        TraceStore::open(a.path()).unwrap().list_ids().unwrap(),
        TraceStore::open(b.path()).unwrap().list_ids().unwrap()
    );
}

#[test]
fn loop_results_do_not_depend_on_worker_count() {
    let run = |workers| {
        let dir = tempfile::tempdir().unwrap();
        let mut o = orchestrator(dir.path());
        o.cfg.workers = workers;
        o.cfg.pipeline.workers = workers;
        let s0 = o.init(o.registry.tasks().to_vec()).unwrap();
        o.run_until(s0, 2, None).unwrap()
    };
    assert_eq!(run(1), run(4));
}
