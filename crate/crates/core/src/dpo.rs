//! Pairwise preference likelihood and the DPO objective over a tabular
//! softmax policy.
//!
//! The toy policy holds one logit vector per state over a fixed action
//! catalog. Only actions enter the likelihood; thoughts are carried in the
//! preference records but do not affect the loss.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::reflection::DpoRecord;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpoError {
    #[error("action `{0}` is not in the catalog")]
    ActionNotInCatalog(String),
    #[error("no preference pairs")]
    EmptyDataset,
    #[error("beta must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("malformed policy file: {0}")]
    Format(String),
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Probability that the first option is preferred, from two rewards.
pub fn pref_likelihood(r_chosen: f64, r_rejected: f64) -> f64 {
    let m = r_chosen.max(r_rejected);
    let c = (r_chosen - m).exp();
    let r = (r_rejected - m).exp();
    c / (c + r)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

const POLICY_FORMAT: &str = "uniact-toy-policy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    format: String,
    version: u32,
    catalog: Vec<Action>,
    logits: BTreeMap<String, Vec<f64>>,
}

/// Softmax policy per state over a shared action catalog. States without an
/// entry have all-zero logits (uniform).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    catalog: Vec<Action>,
    logits: BTreeMap<String, Vec<f64>>,
}

impl ToyPolicy {
    pub fn new(catalog: Vec<Action>) -> Result<Self, DpoError> {
        let catalog: Vec<Action> = catalog.iter().map(Action::canonical).collect();
        let unique: BTreeSet<String> = catalog.iter().map(Action::serialize).collect();
        if unique.len() != catalog.len() {
            return Err(DpoError::Config("duplicate catalog actions".into()));
        }
        if catalog.is_empty() {
            return Err(DpoError::Config("empty catalog".into()));
        }
        Ok(Self {
            catalog,
            logits: BTreeMap::new(),
        })
    }

    pub fn catalog(&self) -> &[Action] {
        &self.catalog
    }

    pub fn states(&self) -> impl Iterator<Item = &String> {
        self.logits.keys()
    }

    pub fn index_of(&self, action: &Action) -> Result<usize, DpoError> {
        let a = action.canonical();
        self.catalog
            .iter()
            .position(|c| *c == a)
            .ok_or_else(|| DpoError::ActionNotInCatalog(action.serialize()))
    }

    pub fn logits(&self, state: &str) -> Vec<f64> {
        self.logits
            .get(state)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.catalog.len()])
    }

    pub fn set_logits(&mut self, state: &str, logits: Vec<f64>) -> Result<(), DpoError> {
        if logits.len() != self.catalog.len() || logits.iter().any(|l| !l.is_finite()) {
            return Err(DpoError::Config(format!(
                "need {} finite logits, got {}",
                self.catalog.len(),
                logits.len()
            )));
        }
        self.logits.insert(state.to_string(), logits);
        Ok(())
    }

    fn logits_mut(&mut self, state: &str) -> &mut Vec<f64> {
        let n = self.catalog.len();
        self.logits
            .entry(state.to_string())
            .or_insert_with(|| vec![0.0; n])
    }

    pub fn log_probs(&self, state: &str) -> Vec<f64> {
        match self.logits.get(state) {
            Some(l) => log_softmax(l),
            None => vec![-(self.catalog.len() as f64).ln(); self.catalog.len()],
        }
    }

    pub fn probs(&self, state: &str) -> Vec<f64> {
        self.log_probs(state).into_iter().map(f64::exp).collect()
    }

    pub fn log_prob(&self, state: &str, action: &Action) -> Result<f64, DpoError> {
        Ok(self.log_probs(state)[self.index_of(action)?])
    }

    pub fn to_json(&self) -> String {
        let file = PolicyFile {
            format: POLICY_FORMAT.into(),
            version: 1,
            catalog: self.catalog.clone(),
            logits: self.logits.clone(),
        };
        serde_json::to_string_pretty(&file).expect("policy serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, DpoError> {
        let file: PolicyFile =
            serde_json::from_str(text).map_err(|e| DpoError::Format(e.to_string()))?;
        if file.format != POLICY_FORMAT || file.version != 1 {
            return Err(DpoError::Format(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        let mut p = Self::new(file.catalog)?;
        for (k, v) in file.logits {
            p.set_logits(&k, v)?;
        }
        Ok(p)
    }
}

/// A preference between two catalog entries in one state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoPair {
    pub state: String,
    pub chosen: usize,
    pub rejected: usize,
}

/// Builds a zero-logit policy over every action appearing in `records` and
/// the matching index pairs.
pub fn pairs_from_records(records: &[DpoRecord]) -> Result<(ToyPolicy, Vec<DpoPair>), DpoError> {
    let mut seen = BTreeMap::new();
    for r in records {
        for a in [&r.chosen.action, &r.rejected.action] {
            let c = a.canonical();
            seen.entry(c.serialize()).or_insert(c);
        }
    }
    let policy = ToyPolicy::new(seen.into_values().collect())?;
    let pairs = records
        .iter()
        .map(|r| {
            Ok(DpoPair {
                state: r.state_key.clone(),
                chosen: policy.index_of(&r.chosen.action)?,
                rejected: policy.index_of(&r.rejected.action)?,
            })
        })
        .collect::<Result<_, DpoError>>()?;
    Ok((policy, pairs))
}

fn check(
    pairs: &[DpoPair],
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    beta: f64,
) -> Result<(), DpoError> {
    if pairs.is_empty() {
        return Err(DpoError::EmptyDataset);
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(DpoError::InvalidBeta(beta));
    }
    if policy.catalog != reference.catalog {
        return Err(DpoError::Config(
            "policy and reference catalogs differ".into(),
        ));
    }
    let n = policy.catalog.len();
    if let Some(p) = pairs.iter().find(|p| p.chosen >= n || p.rejected >= n) {
        return Err(DpoError::ActionNotInCatalog(format!(
            "index {}",
            p.chosen.max(p.rejected)
        )));
    }
    Ok(())
}

fn margin(p: &DpoPair, policy: &ToyPolicy, reference: &ToyPolicy, beta: f64) -> f64 {
    let lp = policy.log_probs(&p.state);
    let lr = reference.log_probs(&p.state);
    beta * ((lp[p.chosen] - lr[p.chosen]) - (lp[p.rejected] - lr[p.rejected]))
}

/// Mean of `-log sigmoid(margin)` over pairs. Terms are computed in parallel
/// and summed in pair order.
pub fn dpo_loss(
    pairs: &[DpoPair],
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    beta: f64,
) -> Result<f64, DpoError> {
    check(pairs, policy, reference, beta)?;
    let terms: Vec<f64> = pairs
        .par_iter()
        .map(|p| softplus(-margin(p, policy, reference, beta)))
        .collect();
    Ok(terms.iter().sum::<f64>() / pairs.len() as f64)
}

/// Analytic gradient of [`dpo_loss`] with respect to every logit of every
/// state that appears in `pairs`.
pub fn dpo_grad(
    pairs: &[DpoPair],
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    beta: f64,
) -> Result<BTreeMap<String, Vec<f64>>, DpoError> {
    check(pairs, policy, reference, beta)?;
    let m = pairs.len() as f64;
    let coeffs: Vec<f64> = pairs
        .par_iter()
        .map(|p| -sigmoid(-margin(p, policy, reference, beta)) * beta / m)
        .collect();
    let n = policy.catalog.len();
    let mut grad: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (p, c) in pairs.iter().zip(coeffs) {
        let g = grad.entry(p.state.clone()).or_insert_with(|| vec![0.0; n]);
        // d log pi(a) / d logit_k = [k = a] - pi_k; the pi_k terms cancel.
        g[p.chosen] += c;
        g[p.rejected] -= c;
    }
    Ok(grad)
}

/// Largest relative error between the analytic gradient and central finite
/// differences. Relative error is `|a - n| / max(|a|, |n|, 1e-4)`; the floor
/// keeps exact zeros from dividing round-off by nothing.
pub fn dpo_grad_check(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[DpoPair],
    beta: f64,
    epsilon: f64,
) -> Result<f64, DpoError> {
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(DpoError::Config(format!(
            "epsilon {epsilon} outside (0, 1e-3]"
        )));
    }
    let analytic = dpo_grad(pairs, policy, reference, beta)?;
    let mut worst: f64 = 0.0;
    let mut probe = policy.clone();
    for (state, g) in &analytic {
        for (k, a) in g.iter().enumerate() {
            let orig = probe.logits(state)[k];
            probe.logits_mut(state)[k] = orig + epsilon;
            let up = dpo_loss(pairs, &probe, reference, beta)?;
            probe.logits_mut(state)[k] = orig - epsilon;
            let down = dpo_loss(pairs, &probe, reference, beta)?;
            probe.logits_mut(state)[k] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 1.0,
            steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    /// Loss of every accepted iterate, starting with the initial one.
    pub losses: Vec<f64>,
    pub final_learning_rate: f64,
}

/// Gradient descent from a copy of `sft`. A step that would raise the loss
/// is rejected and the learning rate halved, so recorded losses never rise.
pub fn train_toy_policy(
    pairs: &[DpoPair],
    sft: &ToyPolicy,
    cfg: &DpoConfig,
) -> Result<TrainOutcome, DpoError> {
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(DpoError::Config(format!(
            "learning rate {} must be >= 0",
            cfg.learning_rate
        )));
    }
    let mut policy = sft.clone();
    let mut lr = cfg.learning_rate;
    let mut loss = dpo_loss(pairs, &policy, sft, cfg.beta)?;
    let mut losses = vec![loss];
    for _ in 0..cfg.steps {
        if lr == 0.0 {
            break;
        }
        let grad = dpo_grad(pairs, &policy, sft, cfg.beta)?;
        let mut next = policy.clone();
        for (state, g) in &grad {
            for (l, d) in next.logits_mut(state).iter_mut().zip(g) {
                *l -= lr * d;
            }
        }
        let next_loss = dpo_loss(pairs, &next, sft, cfg.beta)?;
        if next_loss > loss {
            lr /= 2.0;
            continue;
        }
        policy = next;
        loss = next_loss;
        losses.push(loss);
    }
    Ok(TrainOutcome {
        policy,
        losses,
        final_learning_rate: lr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_action() -> ToyPolicy {
        ToyPolicy::new(vec![Action::click(0.1, 0.1), Action::Wait]).unwrap()
    }

    #[test]
    fn bradley_terry_values() {
        assert_eq!(pref_likelihood(3.0, 3.0), 0.5);
        assert!((pref_likelihood(1.0, 0.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        let p = pref_likelihood(1000.0, 0.0);
        assert!(p.is_finite() && (p - 1.0).abs() < 1e-15);
        assert!(pref_likelihood(-1000.0, 0.0) >= 0.0);
    }

    #[test]
    fn loss_at_reference_is_ln2() {
        let p = two_action();
        let pairs = vec![DpoPair {
            state: "s".into(),
            chosen: 0,
            rejected: 1,
        }];
        assert_eq!(
            dpo_loss(&pairs, &p, &p, 0.1).unwrap(),
            std::f64::consts::LN_2
        );
    }

    #[test]
    fn loss_with_logit_gap_two() {
        let reference = two_action();
        let mut policy = reference.clone();
        policy.set_logits("s", vec![1.0, -1.0]).unwrap();
        let pairs = vec![DpoPair {
            state: "s".into(),
            chosen: 0,
            rejected: 1,
        }];
        let loss = dpo_loss(&pairs, &policy, &reference, 1.0).unwrap();
        assert!((loss - 0.126_928_011_042_972_6).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn empty_and_bad_beta() {
        let p = two_action();
        assert_eq!(dpo_loss(&[], &p, &p, 0.1), Err(DpoError::EmptyDataset));
        let pairs = vec![DpoPair {
            state: "s".into(),
            chosen: 0,
            rejected: 1,
        }];
        assert_eq!(
            dpo_loss(&pairs, &p, &p, 0.0),
            Err(DpoError::InvalidBeta(0.0))
        );
    }

    #[test]
    fn single_pair_training_raises_chosen() {
        let sft = two_action();
        let pairs = vec![DpoPair {
            state: "s".into(),
            chosen: 0,
            rejected: 1,
        }];
        let out = train_toy_policy(&pairs, &sft, &DpoConfig::default()).unwrap();
        assert!(out.policy.probs("s")[0] > sft.probs("s")[0]);
        assert!(out.losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let sft = two_action();
        let pairs = vec![DpoPair {
            state: "s".into(),
            chosen: 0,
            rejected: 1,
        }];
        let cfg = DpoConfig {
            learning_rate: 0.0,
            ..DpoConfig::default()
        };
        assert_eq!(train_toy_policy(&pairs, &sft, &cfg).unwrap().policy, sft);
    }

    #[test]
    fn conflicting_pairs_stay_at_sft() {
        let sft = two_action();
        let pairs = vec![
            DpoPair {
                state: "s".into(),
                chosen: 0,
                rejected: 1,
            },
            DpoPair {
                state: "s".into(),
                chosen: 1,
                rejected: 0,
            },
        ];
        let out = train_toy_policy(&pairs, &sft, &DpoConfig::default()).unwrap();
        for (a, b) in out.policy.probs("s").iter().zip(sft.probs("s")) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_file_round_trip() {
        let mut p = two_action();
        p.set_logits("abc", vec![0.25, -1.5]).unwrap();
        assert_eq!(ToyPolicy::from_json(&p.to_json()).unwrap(), p);
    }

    #[test]
    fn unknown_action() {
        let p = two_action();
        assert!(matches!(
            p.log_prob("s", &Action::Finished),
            Err(DpoError::ActionNotInCatalog(_))
        ));
    }
}
