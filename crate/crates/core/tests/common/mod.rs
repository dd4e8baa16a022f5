#![allow(dead_code)]

use std::sync::{Arc, Mutex};

use rand::Rng;
use uniact_core::agent::{
    format_policy_output, PolicyClient, PolicyError, PolicyProvider, PromptContext,
};
use uniact_core::sim::OraclePolicy;
use uniact_core::{Action, NormPoint, ScrollDirection, Task};

const TEXT_CHARS: &[char] = &[
    'a', 'b', 'z', 'A', 'Q', '0', '9', ' ', ',', '(', ')', '"', '\\', '\n', '\t', '\r', '+', '@',
    '.', 'é', '你',
];

fn grid_point(rng: &mut impl Rng) -> NormPoint {
    let x = rng.random_range(0..=10_000) as f64 / 10_000.0;
    let y = rng.random_range(0..=10_000) as f64 / 10_000.0;
    NormPoint::new(x, y).unwrap()
}

fn text(rng: &mut impl Rng) -> String {
    let n = rng.random_range(1..=12);
    (0..n)
        .map(|_| TEXT_CHARS[rng.random_range(0..TEXT_CHARS.len())])
        .collect()
}

/// Any action of any kind, with coordinates already on the wire grid.
pub fn random_any_action(rng: &mut impl Rng) -> Action {
    match rng.random_range(0..14) {
        0 => Action::Click(grid_point(rng)),
        1 => Action::Drag(grid_point(rng), grid_point(rng)),
        2 => {
            let d = [
                ScrollDirection::Up,
                ScrollDirection::Down,
                ScrollDirection::Left,
                ScrollDirection::Right,
            ][rng.random_range(0..4)];
            Action::Scroll(grid_point(rng), d)
        }
        3 => Action::Type(text(rng)),
        4 => Action::Wait,
        5 => Action::Finished,
        6 => Action::CallUser,
        7 => Action::Hotkey(text(rng)),
        8 => Action::LeftDouble(grid_point(rng)),
        9 => Action::RightSingle(grid_point(rng)),
        10 => Action::LongPress(grid_point(rng)),
        11 => Action::PressBack,
        12 => Action::PressHome,
        _ => Action::PressEnter,
    }
}

/// Records every context a policy is shown.
pub struct Recording {
    pub inner: Box<dyn PolicyClient>,
    pub seen: Arc<Mutex<Vec<PromptContext>>>,
}

impl PolicyClient for Recording {
    fn id(&self) -> String {
        format!("recording({})", self.inner.id())
    }

    fn respond(&mut self, ctx: &PromptContext) -> Result<String, PolicyError> {
        self.seen.lock().unwrap().push(ctx.clone());
        self.inner.respond(ctx)
    }
}

/// The oracle, except that it makes a known mistake at step `error_at`
/// (a click on empty screen) and then idles for one step before resuming.
pub struct MistakeAt {
    pub oracle: OraclePolicy,
    pub error_at: usize,
}

/// A point that hits no element of the observation, if the coarse grid has one.
pub fn empty_spot(ctx: &PromptContext) -> Option<NormPoint> {
    let obs = ctx.current_observation();
    (1..20)
        .flat_map(|i| (1..20).map(move |j| (i, j)))
        .map(|(i, j)| NormPoint::new(i as f64 / 20.0, j as f64 / 20.0).unwrap())
        .find(|p| obs.hit_test(*p).is_none())
}

impl PolicyClient for MistakeAt {
    fn id(&self) -> String {
        "mistake-at".into()
    }

    fn respond(&mut self, ctx: &PromptContext) -> Result<String, PolicyError> {
        let k = ctx.step_index();
        if k == self.error_at {
            let a = empty_spot(ctx).map(Action::Click).unwrap_or(Action::Wait);
            return Ok(format_policy_output(Some("The target should be here."), &a));
        }
        if k == self.error_at + 1 {
            return Ok(format_policy_output(
                Some("Waiting for the screen to change."),
                &Action::Wait,
            ));
        }
        self.oracle.respond(ctx)
    }
}

/// The oracle with its final `Finished()` swapped for `CallUser()`.
pub struct AsksInsteadOfFinishing(pub OraclePolicy);

impl PolicyClient for AsksInsteadOfFinishing {
    fn id(&self) -> String {
        "asks-user".into()
    }

    fn respond(&mut self, ctx: &PromptContext) -> Result<String, PolicyError> {
        let out = self.0.respond(ctx)?;
        Ok(out.replace("Finished()", "CallUser()"))
    }
}

pub struct AskingProvider;

impl PolicyProvider for AskingProvider {
    fn id(&self) -> String {
        "asks-user".into()
    }

    fn policy_for(&self, task: &Task, _seed: u64) -> Box<dyn PolicyClient> {
        Box::new(AsksInsteadOfFinishing(OraclePolicy::new(task)))
    }
}
