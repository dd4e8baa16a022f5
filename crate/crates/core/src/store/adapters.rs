//! Converters from foreign trace encodings into unified steps.
//!
//! An adapter is mostly a verb table: each source verb maps to a rule, and a
//! handful of rules carry the coordinate logic (pixel normalization, swipe
//! interpretation, element-index resolution).
//!
//! Source documents are JSON objects:
//!
//! ```json
//! {"instruction": "...", "screen": {"width": 1080, "height": 2400},
//!  "steps": [{"verb": "tap", "px": [540, 1200]}, {"verb": "press_back"}]}
//! ```

use serde_json::Value;
use thiserror::Error;

use crate::action::{
    normalize_point, Action, ActionError, ActionKind, NormPoint, PixelPoint, Platform,
    PlatformProfile, ScreenDims, ScrollDirection,
};
use crate::agent::{Step, Termination, Trace};
use crate::sim::{BBox, Element, ElementType, Observation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConvertError {
    #[error("step {step}: verb `{verb}` has no unified equivalent")]
    UnmappableAction { step: usize, verb: String },
    #[error("step {step}: coordinates need screen dimensions and none were given")]
    MissingScreenDims { step: usize },
    #[error("step {step}: {message}")]
    Malformed { step: usize, message: String },
    #[error("step {step}: converted action is invalid: {source}")]
    Invalid { step: usize, source: ActionError },
    #[error("unknown adapter `{0}`")]
    UnknownAdapter(String),
    #[error("malformed document: {0}")]
    Document(String),
}

/// How a swipe gesture is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwipeRule {
    /// Scroll at the start point. Content moves against the finger, so an
    /// upward swipe scrolls down.
    Scroll,
    /// A literal drag from start to end.
    Drag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rule {
    /// A pixel point under `px`.
    Point(ActionKind),
    Nullary(ActionKind),
    /// Text under `text`.
    Text(ActionKind),
    /// A fixed key combination.
    Key(&'static str),
    Swipe,
    /// Click the center of `elements[element]`.
    ElementClick,
    /// Scroll in `direction` at the screen center.
    DirectionScroll,
    Unmappable,
}

pub trait ExternalSchemaAdapter: Send + Sync {
    fn schema_id(&self) -> &str;
    fn platform(&self) -> Platform;

    /// Converts one source step into an action and the observation it was
    /// taken on.
    fn convert_step(
        &self,
        index: usize,
        step: &Value,
        dims: Option<ScreenDims>,
    ) -> Result<(Action, Observation), ConvertError>;
}

struct TableAdapter {
    id: &'static str,
    platform: Platform,
    swipe: SwipeRule,
    verbs: &'static [(&'static str, Rule)],
}

const MOBILE_VERBS: &[(&str, Rule)] = &[
    ("tap", Rule::Point(ActionKind::Click)),
    ("long_press", Rule::Point(ActionKind::LongPress)),
    ("swipe", Rule::Swipe),
    ("type", Rule::Text(ActionKind::Type)),
    ("press_back", Rule::Nullary(ActionKind::PressBack)),
    ("press_home", Rule::Nullary(ActionKind::PressHome)),
    ("press_enter", Rule::Nullary(ActionKind::PressEnter)),
    ("wait", Rule::Nullary(ActionKind::Wait)),
    ("done", Rule::Nullary(ActionKind::Finished)),
    ("call_user", Rule::Nullary(ActionKind::CallUser)),
    ("hover", Rule::Unmappable),
];

const WEB_VERBS: &[(&str, Rule)] = &[
    ("click", Rule::ElementClick),
    ("type", Rule::Text(ActionKind::Type)),
    ("hotkey", Rule::Text(ActionKind::Hotkey)),
    ("press_enter", Rule::Key("enter")),
    ("scroll", Rule::DirectionScroll),
    ("done", Rule::Nullary(ActionKind::Finished)),
    ("hover", Rule::Unmappable),
    ("select", Rule::Unmappable),
];

static ADAPTERS: [TableAdapter; 3] = [
    TableAdapter {
        id: "mobile_touch",
        platform: Platform::Mobile,
        swipe: SwipeRule::Scroll,
        verbs: MOBILE_VERBS,
    },
    TableAdapter {
        id: "mobile_touch_drag",
        platform: Platform::Mobile,
        swipe: SwipeRule::Drag,
        verbs: MOBILE_VERBS,
    },
    TableAdapter {
        id: "web_elements",
        platform: Platform::Desktop,
        swipe: SwipeRule::Scroll,
        verbs: WEB_VERBS,
    },
];

pub fn adapter_ids() -> Vec<&'static str> {
    ADAPTERS.iter().map(|a| a.id).collect()
}

pub fn adapter_by_id(id: &str) -> Result<&'static dyn ExternalSchemaAdapter, ConvertError> {
    ADAPTERS
        .iter()
        .find(|a| a.id == id)
        .map(|a| a as &dyn ExternalSchemaAdapter)
        .ok_or_else(|| ConvertError::UnknownAdapter(id.to_string()))
}

fn malformed(step: usize, message: impl Into<String>) -> ConvertError {
    ConvertError::Malformed {
        step,
        message: message.into(),
    }
}

fn pixel_pair(step: usize, v: Option<&Value>, field: &str) -> Result<(f64, f64), ConvertError> {
    let arr = v
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| malformed(step, format!("`{field}` must be a pair of numbers")))?;
    let x = arr[0]
        .as_f64()
        .ok_or_else(|| malformed(step, format!("`{field}` x is not a number")))?;
    let y = arr[1]
        .as_f64()
        .ok_or_else(|| malformed(step, format!("`{field}` y is not a number")))?;
    Ok((x, y))
}

fn to_norm(
    step: usize,
    px: (f64, f64),
    dims: Option<ScreenDims>,
) -> Result<NormPoint, ConvertError> {
    let dims = dims.ok_or(ConvertError::MissingScreenDims { step })?;
    let p = PixelPoint {
        x: px.0.round() as i64,
        y: px.1.round() as i64,
    };
    normalize_point(p, dims)
        .map(|p| p.quantized())
        .map_err(|source| ConvertError::Invalid { step, source })
}

fn text_field(step: usize, v: &Value, field: &str) -> Result<String, ConvertError> {
    v.get(field)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| malformed(step, format!("missing string `{field}`")))
}

fn element_boxes(step: usize, v: &Value, dims: ScreenDims) -> Result<Vec<BBox>, ConvertError> {
    let Some(list) = v.get("elements") else {
        return Ok(Vec::new());
    };
    let list = list
        .as_array()
        .ok_or_else(|| malformed(step, "`elements` must be a list"))?;
    list.iter()
        .map(|b| {
            let nums: Vec<f64> = b
                .as_array()
                .filter(|a| a.len() == 4)
                .and_then(|a| a.iter().map(Value::as_f64).collect())
                .ok_or_else(|| malformed(step, "element boxes are [x0, y0, x1, y1] pixels"))?;
            let (w, h) = (f64::from(dims.width), f64::from(dims.height));
            BBox::new(nums[0] / w, nums[1] / h, nums[2] / w, nums[3] / h)
                .map_err(|m| malformed(step, m))
        })
        .collect()
}

impl ExternalSchemaAdapter for TableAdapter {
    fn schema_id(&self) -> &str {
        self.id
    }

    fn platform(&self) -> Platform {
        self.platform
    }

    fn convert_step(
        &self,
        index: usize,
        step: &Value,
        dims: Option<ScreenDims>,
    ) -> Result<(Action, Observation), ConvertError> {
        let verb = step
            .get("verb")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed(index, "missing `verb`"))?;
        let rule = self
            .verbs
            .iter()
            .find(|(v, _)| *v == verb)
            .map(|(_, r)| *r)
            .unwrap_or(Rule::Unmappable);
        let fallback_dims = dims.unwrap_or(crate::sim::screen_dims(self.platform));
        let mut obs = Observation::blank(fallback_dims);
        let action = match rule {
            Rule::Unmappable => {
                return Err(ConvertError::UnmappableAction {
                    step: index,
                    verb: verb.to_string(),
                })
            }
            Rule::Point(kind) => {
                let p = to_norm(index, pixel_pair(index, step.get("px"), "px")?, dims)?;
                match kind {
                    ActionKind::Click => Action::Click(p),
                    ActionKind::LongPress => Action::LongPress(p),
                    ActionKind::LeftDouble => Action::LeftDouble(p),
                    ActionKind::RightSingle => Action::RightSingle(p),
                    _ => unreachable!("point rules use point kinds"),
                }
            }
            Rule::Nullary(kind) => match kind {
                ActionKind::PressBack => Action::PressBack,
                ActionKind::PressHome => Action::PressHome,
                ActionKind::PressEnter => Action::PressEnter,
                ActionKind::Wait => Action::Wait,
                ActionKind::Finished => Action::Finished,
                ActionKind::CallUser => Action::CallUser,
                _ => unreachable!("nullary rules use nullary kinds"),
            },
            Rule::Text(kind) => {
                let text = text_field(index, step, "text")?;
                match kind {
                    ActionKind::Hotkey => Action::Hotkey(text),
                    _ => Action::Type(text),
                }
            }
            Rule::Key(k) => Action::Hotkey(k.to_string()),
            Rule::Swipe => {
                let from_px = pixel_pair(index, step.get("from"), "from")?;
                let to_px = pixel_pair(index, step.get("to"), "to")?;
                let from = to_norm(index, from_px, dims)?;
                match self.swipe {
                    SwipeRule::Drag => Action::Drag(from, to_norm(index, to_px, dims)?),
                    SwipeRule::Scroll => {
                        let (dx, dy) = (to_px.0 - from_px.0, to_px.1 - from_px.1);
                        if dx == 0.0 && dy == 0.0 {
                            return Err(malformed(index, "zero-length swipe"));
                        }
                        let dir = if dy.abs() >= dx.abs() {
                            if dy < 0.0 {
                                ScrollDirection::Down
                            } else {
                                ScrollDirection::Up
                            }
                        } else if dx < 0.0 {
                            ScrollDirection::Right
                        } else {
                            ScrollDirection::Left
                        };
                        Action::Scroll(from, dir)
                    }
                }
            }
            Rule::ElementClick => {
                let dims = dims.ok_or(ConvertError::MissingScreenDims { step: index })?;
                let boxes = element_boxes(index, step, dims)?;
                let i = step
                    .get("element")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| malformed(index, "missing element index"))?
                    as usize;
                let b = boxes.get(i).ok_or_else(|| {
                    malformed(
                        index,
                        format!("element {i} not in a list of {}", boxes.len()),
                    )
                })?;
                let center = b.center();
                obs = Observation::new(
                    dims,
                    boxes
                        .iter()
                        .enumerate()
                        .map(|(j, b)| {
                            Element::new(
                                format!("e{j}"),
                                ElementType::Button,
                                *b,
                                format!("element {j}"),
                            )
                        })
                        .collect(),
                );
                Action::Click(center)
            }
            Rule::DirectionScroll => {
                let dir: ScrollDirection = text_field(index, step, "direction")?
                    .parse()
                    .map_err(|_| malformed(index, "bad scroll direction"))?;
                Action::Scroll(NormPoint::new(0.5, 0.5).expect("center"), dir)
            }
        };
        PlatformProfile::new(self.platform)
            .check(&action)
            .map_err(|source| ConvertError::Invalid {
                step: index,
                source,
            })?;
        Ok((action, obs))
    }
}

fn doc_dims(doc: &Value) -> Result<Option<ScreenDims>, ConvertError> {
    let Some(s) = doc.get("screen") else {
        return Ok(None);
    };
    let w = s.get("width").and_then(Value::as_u64);
    let h = s.get("height").and_then(Value::as_u64);
    match (w, h) {
        (Some(w), Some(h)) if w > 0 && h > 0 && w <= u32::MAX as u64 && h <= u32::MAX as u64 => {
            Ok(Some(ScreenDims::new(w as u32, h as u32)))
        }
        _ => Err(ConvertError::Document(
            "`screen` needs positive width and height".into(),
        )),
    }
}

/// Converts every step of a source document. Each step's `raw` keeps the
/// compact source JSON of that step.
pub fn convert_external(
    doc: &Value,
    adapter: &dyn ExternalSchemaAdapter,
) -> Result<Vec<Step>, ConvertError> {
    let dims = doc_dims(doc)?;
    let steps = doc
        .get("steps")
        .and_then(Value::as_array)
        .ok_or_else(|| ConvertError::Document("missing `steps` list".into()))?;
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (action, observation) = adapter.convert_step(i, s, dims)?;
            Ok(Step {
                step_index: i,
                observation,
                thought: None,
                action,
                raw_policy_output: s.to_string(),
            })
        })
        .collect()
}

/// Converts a document into a trace. Termination follows the last action:
/// `Finished` and `CallUser` map to themselves, anything else to
/// `budget_exhausted`.
pub fn convert_to_trace(
    doc: &Value,
    adapter: &dyn ExternalSchemaAdapter,
) -> Result<Trace, ConvertError> {
    let instruction = doc
        .get("instruction")
        .and_then(Value::as_str)
        .ok_or_else(|| ConvertError::Document("missing `instruction`".into()))?;
    let steps = convert_external(doc, adapter)?;
    let termination = match steps.last().map(|s| &s.action) {
        Some(Action::Finished) => Termination::Finished,
        Some(Action::CallUser) => Termination::CallUser,
        _ => Termination::BudgetExhausted,
    };
    let mut metadata = std::collections::BTreeMap::new();
    metadata.insert("source".to_string(), adapter.schema_id().to_string());
    Ok(Trace {
        trace_id: String::new(),
        instruction: instruction.to_string(),
        platform: adapter.platform(),
        steps,
        termination,
        metadata,
    }
    .with_content_id())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn one(adapter: &str, step: Value, screen: Option<(u32, u32)>) -> Result<Action, ConvertError> {
        let mut doc = json!({"instruction": "x", "steps": [step]});
        if let Some((w, h)) = screen {
            doc["screen"] = json!({"width": w, "height": h});
        }
        convert_external(&doc, adapter_by_id(adapter).unwrap()).map(|s| s[0].action.clone())
    }

    #[test]
    fn tap_midpoint() {
        let a = one(
            "mobile_touch",
            json!({"verb": "tap", "px": [960, 540]}),
            Some((1920, 1080)),
        )
        .unwrap();
        assert_eq!(a, Action::click(0.5, 0.5));
    }

    #[test]
    fn press_back_maps() {
        assert_eq!(
            one("mobile_touch", json!({"verb": "press_back"}), None).unwrap(),
            Action::PressBack
        );
    }

    #[test]
    fn hover_is_unmappable() {
        for adapter in adapter_ids() {
            let e = one(adapter, json!({"verb": "hover"}), Some((100, 100))).unwrap_err();
            assert!(matches!(e, ConvertError::UnmappableAction { .. }));
        }
    }

    #[test]
    fn tap_without_screen() {
        let e = one("mobile_touch", json!({"verb": "tap", "px": [1, 1]}), None).unwrap_err();
        assert_eq!(e, ConvertError::MissingScreenDims { step: 0 });
    }

    #[test]
    fn swipe_rules() {
        let s = json!({"verb": "swipe", "from": [540, 1800], "to": [540, 600]});
        let a = one("mobile_touch", s.clone(), Some((1080, 2400))).unwrap();
        assert_eq!(
            a,
            Action::Scroll(NormPoint::new(0.5, 0.75).unwrap(), ScrollDirection::Down)
        );
        let a = one("mobile_touch_drag", s, Some((1080, 2400))).unwrap();
        assert_eq!(
            a,
            Action::Drag(
                NormPoint::new(0.5, 0.75).unwrap(),
                NormPoint::new(0.5, 0.25).unwrap()
            )
        );
    }

    #[test]
    fn element_click_resolves_center() {
        let s = json!({"verb": "click", "element": 1, "elements": [[0, 0, 100, 100], [960, 540, 1920, 1080]]});
        let doc =
            json!({"instruction": "x", "screen": {"width": 1920, "height": 1080}, "steps": [s]});
        let steps = convert_external(&doc, adapter_by_id("web_elements").unwrap()).unwrap();
        assert_eq!(steps[0].action, Action::click(0.75, 0.75));
        assert_eq!(steps[0].observation.elements.len(), 2);
        assert_eq!(
            steps[0]
                .observation
                .hit_test(NormPoint::new(0.75, 0.75).unwrap())
                .unwrap()
                .element_id,
            "e1"
        );
    }

    #[test]
    fn converted_actions_survive_text_round_trip() {
        let doc = json!({"instruction": "x", "screen": {"width": 1080, "height": 2400}, "steps": [
            {"verb": "tap", "px": [333, 777]},
            {"verb": "type", "text": "hi \"there\""},
            {"verb": "long_press", "px": [1, 2399]},
            {"verb": "done"}
        ]});
        let t = convert_to_trace(&doc, adapter_by_id("mobile_touch").unwrap()).unwrap();
        assert_eq!(t.termination, Termination::Finished);
        for s in &t.steps {
            let text = s.action.serialize();
            assert_eq!(
                crate::action::parse_action(&text, &PlatformProfile::mobile()).unwrap(),
                s.action
            );
        }
    }

    #[test]
    fn unknown_adapter() {
        assert!(matches!(
            adapter_by_id("nope"),
            Err(ConvertError::UnknownAdapter(_))
        ));
    }
}
