mod common;

use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uniact_core::agent::{run_episode, window_context, EpisodeConfig, PolicyProvider};
use uniact_core::dpo::{dpo_loss, sigmoid, DpoPair, ToyPolicy};
use uniact_core::filter::{
    apply_review, rule_filter, truncate, Decision, ReviewAnnotation, ReviewOutcome, ReviewVerdict,
    RuleConfig,
};
use uniact_core::sim::{NoisyProvider, OracleProvider};
use uniact_core::store::{decode_trace, encode_trace, TraceStore};
use uniact_core::{Action, NormPoint, SimEnv, TaskRegistry, Trace};

fn noisy_trace(task_index: usize, seed: u64, p: f64) -> Trace {
    let tasks = TaskRegistry::bundled().tasks().to_vec();
    let task = tasks[task_index % tasks.len()].with_seed(seed);
    let provider = NoisyProvider::new(Arc::new(OracleProvider::new()), p);
    let mut policy = provider.policy_for(&task, seed);
    let mut env = SimEnv::new();
    run_episode(&task, &mut env, policy.as_mut(), &EpisodeConfig::new(15, 5))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn serialize_then_parse_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = common::random_any_action(&mut rng);
        prop_assert_eq!(a.serialize().parse::<Action>().unwrap(), a);
    }

    #[test]
    fn parse_never_panics_and_reparse_is_stable(text in "\\PC{0,40}") {
        if let Ok(a) = text.parse::<Action>() {
            let again = a.serialize().parse::<Action>().unwrap();
            prop_assert_eq!(again.serialize(), a.serialize());
        }
    }

    #[test]
    fn any_coordinates_survive_at_wire_precision(x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
        let p = NormPoint::new(x, y).unwrap();
        let back: Action = Action::Click(p).serialize().parse().unwrap();
        prop_assert_eq!(back, Action::Click(p.quantized()));
        prop_assert!((p.quantized().x() - x).abs() <= 5e-5 + 1e-12);
    }

    #[test]
    fn window_keeps_every_pair_and_at_most_n_observations(
        task_index in 0usize..10, seed in 0u64..200, window in 1usize..10, p in 0.0f64..1.0,
    ) {
        let trace = noisy_trace(task_index, seed, p);
        for k in 0..trace.len() {
            let ctx = window_context(&trace.instruction, trace.platform, &trace.steps[..k], &trace.steps[k].observation, window);
            prop_assert!(ctx.observations.len() <= window);
            prop_assert_eq!(ctx.observations.len(), window.min(k + 1));
            prop_assert_eq!(ctx.history.len(), k);
            prop_assert_eq!(&ctx.observations.last().unwrap().digest, &trace.steps[k].observation.digest);
        }
    }

    #[test]
    fn stored_traces_round_trip_byte_exactly(task_index in 0usize..10, seed in 0u64..200, p in 0.0f64..1.0) {
        let trace = noisy_trace(task_index, seed, p);
        let bytes = encode_trace(&trace);
        let back = decode_trace(&bytes).unwrap();
        prop_assert_eq!(&back, &trace);
        prop_assert_eq!(encode_trace(&back), bytes);
        prop_assert_eq!(back.content_id(), trace.trace_id.clone());
    }

    #[test]
    fn oracle_traces_pass_the_rules(task_index in 0usize..10, seed in 0u64..500) {
        let trace = noisy_trace(task_index, seed, 0.0);
        let tasks = TaskRegistry::bundled().tasks().to_vec();
        let task = tasks[task_index % tasks.len()].with_seed(seed);
        let v = rule_filter(&trace, Some(&task), &RuleConfig::default()).unwrap();
        prop_assert_eq!(v.decision, Decision::Keep);
    }

    #[test]
    fn truncation_is_a_prefix(task_index in 0usize..10, seed in 0u64..200, p in 0.0f64..1.0, cut in 0usize..20) {
        let trace = noisy_trace(task_index, seed, p);
        let ann = ReviewAnnotation {
            trace_id: trace.trace_id.clone(),
            error_step: cut,
            verdict: ReviewVerdict::Truncate,
            annotator: "prop".into(),
            note: String::new(),
        };
        match apply_review(&trace, &ann) {
            Err(_) => prop_assert!(cut >= trace.len()),
            Ok(ReviewOutcome::Drop) => prop_assert_eq!(cut, 0),
            Ok(ReviewOutcome::Truncated(t)) => {
                prop_assert_eq!(t.len(), cut);
                prop_assert_eq!(&t.steps[..], &trace.steps[..cut]);
                prop_assert_eq!(t, truncate(&trace, cut));
            }
            Ok(ReviewOutcome::Keep(_)) => prop_assert!(false, "truncate verdict kept the trace"),
        }
    }

    #[test]
    fn policy_probabilities_normalize_and_ignore_shifts(
        logits in prop::collection::vec(-50.0f64..50.0, 2..8), shift in -100.0f64..100.0,
    ) {
        let cat: Vec<Action> = (0..logits.len()).map(|i| Action::click(0.1 * i as f64, 0.5)).collect();
        let mut a = ToyPolicy::new(cat.clone()).unwrap();
        a.set_logits("s", logits.clone()).unwrap();
        let total: f64 = a.probs("s").iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let mut b = ToyPolicy::new(cat).unwrap();
        b.set_logits("s", logits.iter().map(|l| l + shift).collect()).unwrap();
        for (x, y) in a.log_probs("s").iter().zip(b.log_probs("s")) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn single_pair_loss_is_softplus_of_negative_margin(
        l in prop::collection::vec(-5.0f64..5.0, 3), beta in 0.01f64..5.0,
    ) {
        let cat: Vec<Action> = (0..3).map(|i| Action::click(0.1 * i as f64, 0.5)).collect();
        let reference = ToyPolicy::new(cat.clone()).unwrap();
        let mut policy = ToyPolicy::new(cat).unwrap();
        policy.set_logits("s", l.clone()).unwrap();
        let pair = DpoPair { state: "s".into(), chosen: 0, rejected: 1 };
        let loss = dpo_loss(&[pair], &policy, &reference, beta).unwrap();
        let expected = -sigmoid(beta * (l[0] - l[1])).ln();
        prop_assert!((loss - expected).abs() < 1e-9 * expected.max(1.0));
    }
}

#[test]
fn store_save_is_idempotent_and_listing_sorted() {
    let dir = tempfile::tempdir().unwrap();
    let store = TraceStore::open(dir.path()).unwrap();
    let traces: Vec<Trace> = (0..12).map(|i| noisy_trace(i, i as u64, 0.3)).collect();
    let mut ids: Vec<String> = traces
        .iter()
        .map(|t| store.save_trace(t).unwrap())
        .collect();
    for t in &traces {
        store.save_trace(t).unwrap();
    }
    ids.sort();
    ids.dedup();
    assert_eq!(store.list_ids().unwrap(), ids);
    for t in &traces {
        assert_eq!(store.load_bytes(&t.trace_id).unwrap(), encode_trace(t));
    }
}
