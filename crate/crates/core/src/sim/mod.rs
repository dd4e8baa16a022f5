//! A deterministic, symbolic GUI environment.
//!
//! Screens are lists of typed elements with normalized bounding boxes instead
//! of pixels. Small mock apps (a form filler, a settings panel, a two-screen
//! file manager and a browser) are finite state machines driven by the
//! unified actions; each one ships a goal checker and a scripted oracle that
//! knows a shortest path to the goal from any state.

mod apps;
mod env;
mod policy;
mod registry;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{NormPoint, Platform, ScreenDims};
use crate::hashing::short_hash;

pub use env::{screen_dims, OracleStep, SimEnv};
pub use policy::{
    random_action, NoisyPolicy, NoisyProvider, OraclePolicy, OracleProvider, ScriptedPolicy,
};
pub use registry::{bundled_tasks, TaskRegistry};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("unknown app `{0}`")]
    UnknownApp(String),
    #[error("unknown goal `{0}`")]
    UnknownGoal(String),
    #[error("no scripted oracle for task `{0}`")]
    NoOracle(String),
    #[error("task parameter error: {0}")]
    BadParams(String),
    #[error("environment has not been reset")]
    NotReset,
    #[error("goal already reached; the oracle has no further action")]
    GoalReached,
    #[error("task registry: {0}")]
    Registry(String),
}

/// Axis-aligned box in normalized screen coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, String> {
        let in_unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !(in_unit(x0) && in_unit(y0) && in_unit(x1) && in_unit(y1)) {
            return Err(format!(
                "box ({x0}, {y0}, {x1}, {y1}) outside the unit square"
            ));
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(format!("box ({x0}, {y0}, {x1}, {y1}) is empty"));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Closed-box membership: points on the edge are inside.
    pub fn contains(&self, p: NormPoint) -> bool {
        self.x0 <= p.x() && p.x() <= self.x1 && self.y0 <= p.y() && p.y() <= self.y1
    }

    /// Center snapped to wire precision.
    pub fn center(&self) -> NormPoint {
        NormPoint::new((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
            .expect("center of a valid box")
            .quantized()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementType {
    Button,
    TextField,
    Checkbox,
    Label,
    Icon,
    ListItem,
}

impl ElementType {
    pub fn as_str(&self) -> &'static str {
        match self {
            ElementType::Button => "button",
            ElementType::TextField => "text_field",
            ElementType::Checkbox => "checkbox",
            ElementType::Label => "label",
            ElementType::Icon => "icon",
            ElementType::ListItem => "list_item",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Element {
    pub element_id: String,
    pub etype: ElementType,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub text: String,
    #[serde(default)]
    pub state: BTreeMap<String, String>,
}

impl Element {
    pub fn new(
        id: impl Into<String>,
        etype: ElementType,
        bbox: BBox,
        text: impl Into<String>,
    ) -> Self {
        Self {
            element_id: id.into(),
            etype,
            bbox,
            text: text.into(),
            state: BTreeMap::new(),
        }
    }

    pub fn with_state(mut self, key: &str, value: impl ToString) -> Self {
        self.state.insert(key.to_string(), value.to_string());
        self
    }
}

/// One symbolic screenshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observation {
    pub screen_dims: ScreenDims,
    pub elements: Vec<Element>,
    pub screen_text: String,
    pub digest: String,
}

impl Observation {
    pub fn new(screen_dims: ScreenDims, elements: Vec<Element>) -> Self {
        let screen_text = render_text(&elements, false);
        let digest = compute_digest(screen_dims, &elements);
        Self {
            screen_dims,
            elements,
            screen_text,
            digest,
        }
    }

    /// A screen with no elements, used for converted external data.
    pub fn blank(screen_dims: ScreenDims) -> Self {
        Self::new(screen_dims, Vec::new())
    }

    /// The topmost element under `p`; later elements are drawn on top.
    pub fn hit_test(&self, p: NormPoint) -> Option<&Element> {
        self.elements.iter().rev().find(|e| e.bbox.contains(p))
    }

    pub fn element(&self, id: &str) -> Option<&Element> {
        self.elements.iter().find(|e| e.element_id == id)
    }

    /// True when the stored digest matches the elements and ids are unique.
    pub fn is_consistent(&self) -> bool {
        let mut ids: Vec<&str> = self
            .elements
            .iter()
            .map(|e| e.element_id.as_str())
            .collect();
        ids.sort_unstable();
        let unique = ids.windows(2).all(|w| w[0] != w[1]);
        unique && self.digest == compute_digest(self.screen_dims, &self.elements)
    }
}

fn compute_digest(dims: ScreenDims, elements: &[Element]) -> String {
    let canon = serde_json::to_vec(&(dims, elements)).expect("elements serialize");
    short_hash(&canon)
}

fn render_text(elements: &[Element], markers: bool) -> String {
    let mut out = String::new();
    for (i, e) in elements.iter().enumerate() {
        if markers {
            let _ = write!(out, "[{}] ", i + 1);
        }
        let _ = write!(
            out,
            "{} #{} \"{}\" ({:.2}, {:.2}, {:.2}, {:.2})",
            e.etype.as_str(),
            e.element_id,
            e.text,
            e.bbox.x0,
            e.bbox.y0,
            e.bbox.x1,
            e.bbox.y1
        );
        for (k, v) in &e.state {
            let _ = write!(out, " {k}={v}");
        }
        out.push('\n');
    }
    out
}

/// Set-of-Mark labels attached to the elements of one screen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SomOverlay {
    pub markers: Vec<SomMarker>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SomMarker {
    pub label: String,
    pub element_id: String,
}

/// Numbers every element `1, 2, ...` in list order and writes the marks into
/// the screen text. The digest is untouched since elements do not change.
pub fn render_som(obs: &Observation) -> (Observation, SomOverlay) {
    let markers = obs
        .elements
        .iter()
        .enumerate()
        .map(|(i, e)| SomMarker {
            label: (i + 1).to_string(),
            element_id: e.element_id.clone(),
        })
        .collect();
    let mut marked = obs.clone();
    marked.screen_text = render_text(&obs.elements, true);
    (marked, SomOverlay { markers })
}

/// A parameterized task for one of the bundled apps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub task_id: String,
    pub app: String,
    pub instruction: String,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    pub seed: u64,
    pub goal: String,
    pub platform: Platform,
    /// Upper bound on oracle actions (including the final `Finished`) from
    /// reset to completion.
    pub max_steps: usize,
}

impl Task {
    pub fn param(&self, key: &str) -> Result<&str, SimError> {
        self.params
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| SimError::BadParams(format!("{}: missing `{key}`", self.task_id)))
    }

    pub fn with_seed(&self, seed: u64) -> Task {
        Task {
            seed,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn three() -> Observation {
        Observation::new(
            ScreenDims::new(100, 100),
            vec![
                Element::new("a", ElementType::Label, bx(0.0, 0.0, 1.0, 1.0), "bg"),
                Element::new("b", ElementType::Button, bx(0.1, 0.1, 0.3, 0.3), "ok"),
                Element::new("c", ElementType::Checkbox, bx(0.2, 0.2, 0.4, 0.4), "x")
                    .with_state("checked", false),
            ],
        )
    }

    #[test]
    fn later_elements_occlude_earlier() {
        let obs = three();
        let p = NormPoint::new(0.25, 0.25).unwrap();
        assert_eq!(obs.hit_test(p).unwrap().element_id, "c");
        let p = NormPoint::new(0.15, 0.15).unwrap();
        assert_eq!(obs.hit_test(p).unwrap().element_id, "b");
        let p = NormPoint::new(0.9, 0.9).unwrap();
        assert_eq!(obs.hit_test(p).unwrap().element_id, "a");
    }

    #[test]
    fn digest_tracks_any_element_change() {
        let obs = three();
        let mut els = obs.elements.clone();
        els[2].state.insert("checked".into(), "true".into());
        assert_ne!(Observation::new(obs.screen_dims, els).digest, obs.digest);
        let mut els = obs.elements.clone();
        els[1].text = "OK".into();
        assert_ne!(Observation::new(obs.screen_dims, els).digest, obs.digest);
        assert_eq!(
            Observation::new(obs.screen_dims, obs.elements.clone()).digest,
            obs.digest
        );
        assert!(obs.is_consistent());
    }

    #[test]
    fn som_labels_follow_element_order() {
        let (marked, overlay) = render_som(&three());
        let labels: Vec<_> = overlay.markers.iter().map(|m| m.label.as_str()).collect();
        assert_eq!(labels, ["1", "2", "3"]);
        assert!(marked.screen_text.starts_with("[1] label #a"));
        assert_eq!(marked.digest, three().digest);
        let (again, overlay2) = render_som(&marked);
        assert_eq!(overlay, overlay2);
        assert_eq!(again.screen_text, marked.screen_text);
    }

    #[test]
    fn som_on_empty_screen() {
        let (_, overlay) = render_som(&Observation::blank(ScreenDims::new(10, 10)));
        assert!(overlay.markers.is_empty());
    }

    #[test]
    fn box_validation_and_closed_membership() {
        assert!(BBox::new(0.5, 0.1, 0.5, 0.2).is_err());
        assert!(BBox::new(0.1, 0.1, 1.2, 0.2).is_err());
        let b = bx(0.1, 0.1, 0.3, 0.3);
        assert!(b.contains(NormPoint::new(0.1, 0.3).unwrap()));
        assert!(!b.contains(NormPoint::new(0.31, 0.2).unwrap()));
        assert_eq!(b.center(), NormPoint::new(0.2, 0.2).unwrap());
    }
}
