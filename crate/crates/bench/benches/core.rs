use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use uniact_core::agent::EpisodeConfig;
use uniact_core::dpo::{dpo_grad, dpo_loss, DpoPair, ToyPolicy};
use uniact_core::eval::run_task_episode;
use uniact_core::sim::OracleProvider;
use uniact_core::{parse_action, Action, PlatformProfile, TaskRegistry};

const SAMPLES: &[&str] = &[
    "Click(0.1250, 0.5000)",
    "Type(\"hello \\\"world\\\"\")",
    "Hotkey(\"Ctrl+Shift+T\")",
    "Scroll(0.5000, 0.5000, down)",
    "Drag(0.1000, 0.2000, 0.3000, 0.4000)",
    "Finished()",
];

fn grammar(c: &mut Criterion) {
    let profile = PlatformProfile::desktop();
    c.bench_function("parse_action", |b| {
        b.iter(|| {
            for s in SAMPLES {
                black_box(parse_action(black_box(s), &profile).ok());
            }
        })
    });
    let actions: Vec<Action> = SAMPLES
        .iter()
        .filter_map(|s| parse_action(s, &profile).ok())
        .collect();
    assert_eq!(actions.len(), SAMPLES.len());
    c.bench_function("serialize_action", |b| {
        b.iter(|| {
            for a in &actions {
                black_box(a.to_string());
            }
        })
    });
}

fn dpo(c: &mut Criterion) {
    let n = 16;
    let catalog: Vec<Action> = (0..n)
        .map(|i| Action::click(0.03 + 0.06 * i as f64, 0.5))
        .collect();
    let reference = ToyPolicy::new(catalog.clone()).unwrap();
    let mut policy = ToyPolicy::new(catalog).unwrap();
    let states: Vec<String> = (0..64).map(|i| format!("s{i}")).collect();
    for (i, s) in states.iter().enumerate() {
        let logits = (0..n)
            .map(|k| ((i * 7 + k * 3) % 11) as f64 / 5.0 - 1.0)
            .collect();
        policy.set_logits(s, logits).unwrap();
    }
    let pairs: Vec<DpoPair> = (0..1024)
        .map(|i| DpoPair {
            state: states[i % states.len()].clone(),
            chosen: i % n,
            rejected: (i + 1 + i / n) % n,
        })
        .filter(|p| p.chosen != p.rejected)
        .collect();
    c.bench_function("dpo_loss_1k", |b| {
        b.iter(|| dpo_loss(&pairs, &policy, &reference, 0.1).unwrap())
    });
    c.bench_function("dpo_grad_1k", |b| {
        b.iter(|| dpo_grad(&pairs, &policy, &reference, 0.1).unwrap())
    });
}

fn episode(c: &mut Criterion) {
    let registry = TaskRegistry::bundled();
    let task = registry.get("form_contact").unwrap().clone();
    let provider = OracleProvider::new();
    let cfg = EpisodeConfig::new(20, 5);
    c.bench_function("oracle_episode", |b| {
        b.iter(|| run_task_episode(&task, &provider, 0, &cfg))
    });
}

criterion_group!(benches, grammar, dpo, episode);
criterion_main!(benches);
