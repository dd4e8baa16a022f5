//! The unified action space shared by every platform, plus its one-line
//! textual grammar.
//!
//! Actions are written as calls, `Kind(arg, arg, ...)`, with positional
//! arguments. Coordinates are fractions of the screen size in `[0, 1]` and are
//! printed with exactly four decimals, which keeps sub-pixel precision even on
//! 4K screens:
//!
//! ```text
//! Click(0.5000, 0.5000)
//! Drag(0.1000, 0.2000, 0.8000, 0.2000)
//! Scroll(0.5000, 0.5000, down)
//! Type("hello \"world\"")
//! Hotkey("ctrl+shift+t")
//! Finished()
//! ```
//!
//! Which kinds are accepted depends on the [`PlatformProfile`]: the seven
//! shared kinds everywhere, plus desktop-only or mobile-only extras.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of decimals used for coordinates in the wire format.
pub const COORD_DECIMALS: usize = 4;
const GRID: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActionError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("{kind} takes {expected} argument(s), got {found}")]
    Arity {
        kind: ActionKind,
        expected: usize,
        found: usize,
    },
    #[error("coordinate {0} outside [0, 1]")]
    Range(f64),
    #[error("{kind} is not available on the {platform} platform")]
    Platform {
        kind: ActionKind,
        platform: Platform,
    },
}

impl ActionError {
    /// Stable machine-readable name of the error class.
    pub fn class(&self) -> &'static str {
        match self {
            ActionError::Syntax(_) => "SyntaxError",
            ActionError::UnknownAction(_) => "UnknownAction",
            ActionError::Arity { .. } => "ArityError",
            ActionError::Range(_) => "RangeError",
            ActionError::Platform { .. } => "PlatformError",
        }
    }
}

/// A point expressed as fractions of the screen width and height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormPoint {
    x: f64,
    y: f64,
}

impl NormPoint {
    pub fn new(x: f64, y: f64) -> Result<Self, ActionError> {
        for v in [x, y] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(ActionError::Range(v));
            }
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    /// Coordinates as integer multiples of 1e-4, the wire precision.
    pub fn ticks(&self) -> (i64, i64) {
        (
            (self.x * GRID).round() as i64,
            (self.y * GRID).round() as i64,
        )
    }

    /// The point snapped to the 4-decimal grid, i.e. what survives a
    /// serialize/parse cycle.
    pub fn quantized(&self) -> Self {
        let (tx, ty) = self.ticks();
        Self {
            x: tx as f64 / GRID,
            y: ty as f64 / GRID,
        }
    }

    /// Equality at wire precision.
    pub fn same_at_precision(&self, other: &NormPoint) -> bool {
        self.ticks() == other.ticks()
    }
}

/// Screen size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenDims {
    pub width: u32,
    pub height: u32,
}

impl ScreenDims {
    pub const fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: i64,
    pub y: i64,
}

/// Maps a pixel position to screen fractions. The far edges (`x == width`,
/// `y == height`) are inside the screen.
pub fn normalize_point(px: PixelPoint, dims: ScreenDims) -> Result<NormPoint, ActionError> {
    if dims.width == 0 || dims.height == 0 {
        return Err(ActionError::Range(0.0));
    }
    let (w, h) = (dims.width as i64, dims.height as i64);
    if px.x < 0 || px.x > w {
        return Err(ActionError::Range(px.x as f64 / w as f64));
    }
    if px.y < 0 || px.y > h {
        return Err(ActionError::Range(px.y as f64 / h as f64));
    }
    NormPoint::new(px.x as f64 / w as f64, px.y as f64 / h as f64)
}

/// Nearest pixel to a normalized point; halves round away from zero.
pub fn denormalize_point(p: NormPoint, dims: ScreenDims) -> PixelPoint {
    PixelPoint {
        x: (p.x * dims.width as f64).round() as i64,
        y: (p.y * dims.height as f64).round() as i64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScrollDirection {
    Up,
    Down,
    Left,
    Right,
}

impl ScrollDirection {
    pub const ALL: [ScrollDirection; 4] = [
        ScrollDirection::Up,
        ScrollDirection::Down,
        ScrollDirection::Left,
        ScrollDirection::Right,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScrollDirection::Up => "up",
            ScrollDirection::Down => "down",
            ScrollDirection::Left => "left",
            ScrollDirection::Right => "right",
        }
    }
}

impl FromStr for ScrollDirection {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "up" => Ok(ScrollDirection::Up),
            "down" => Ok(ScrollDirection::Down),
            "left" => Ok(ScrollDirection::Left),
            "right" => Ok(ScrollDirection::Right),
            other => Err(ActionError::Syntax(format!(
                "unknown scroll direction `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    Click,
    Drag,
    Scroll,
    Type,
    Wait,
    Finished,
    CallUser,
    Hotkey,
    LeftDouble,
    RightSingle,
    LongPress,
    PressBack,
    PressHome,
    PressEnter,
}

impl ActionKind {
    pub const ALL: [ActionKind; 14] = [
        ActionKind::Click,
        ActionKind::Drag,
        ActionKind::Scroll,
        ActionKind::Type,
        ActionKind::Wait,
        ActionKind::Finished,
        ActionKind::CallUser,
        ActionKind::Hotkey,
        ActionKind::LeftDouble,
        ActionKind::RightSingle,
        ActionKind::LongPress,
        ActionKind::PressBack,
        ActionKind::PressHome,
        ActionKind::PressEnter,
    ];

    pub const SHARED: [ActionKind; 7] = [
        ActionKind::Click,
        ActionKind::Drag,
        ActionKind::Scroll,
        ActionKind::Type,
        ActionKind::Wait,
        ActionKind::Finished,
        ActionKind::CallUser,
    ];

    pub const DESKTOP_EXTRA: [ActionKind; 3] = [
        ActionKind::Hotkey,
        ActionKind::LeftDouble,
        ActionKind::RightSingle,
    ];

    pub const MOBILE_EXTRA: [ActionKind; 4] = [
        ActionKind::LongPress,
        ActionKind::PressBack,
        ActionKind::PressHome,
        ActionKind::PressEnter,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ActionKind::Click => "Click",
            ActionKind::Drag => "Drag",
            ActionKind::Scroll => "Scroll",
            ActionKind::Type => "Type",
            ActionKind::Wait => "Wait",
            ActionKind::Finished => "Finished",
            ActionKind::CallUser => "CallUser",
            ActionKind::Hotkey => "Hotkey",
            ActionKind::LeftDouble => "LeftDouble",
            ActionKind::RightSingle => "RightSingle",
            ActionKind::LongPress => "LongPress",
            ActionKind::PressBack => "PressBack",
            ActionKind::PressHome => "PressHome",
            ActionKind::PressEnter => "PressEnter",
        }
    }

    pub fn from_name(name: &str) -> Option<ActionKind> {
        ActionKind::ALL.iter().copied().find(|k| k.name() == name)
    }

    /// Number of positional arguments in the textual form.
    pub fn arity(&self) -> usize {
        match self {
            ActionKind::Click
            | ActionKind::LeftDouble
            | ActionKind::RightSingle
            | ActionKind::LongPress => 2,
            ActionKind::Drag => 4,
            ActionKind::Scroll => 3,
            ActionKind::Type | ActionKind::Hotkey => 1,
            ActionKind::Wait
            | ActionKind::Finished
            | ActionKind::CallUser
            | ActionKind::PressBack
            | ActionKind::PressHome
            | ActionKind::PressEnter => 0,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, ActionKind::Finished | ActionKind::CallUser)
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Shared,
    Desktop,
    Mobile,
}

impl Platform {
    pub fn as_str(&self) -> &'static str {
        match self {
            Platform::Shared => "shared",
            Platform::Desktop => "desktop",
            Platform::Mobile => "mobile",
        }
    }
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Platform {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shared" => Ok(Platform::Shared),
            "desktop" => Ok(Platform::Desktop),
            "mobile" => Ok(Platform::Mobile),
            other => Err(format!("unknown platform `{other}`")),
        }
    }
}

/// The set of action kinds a platform accepts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlatformProfile {
    name: Platform,
    allowed: BTreeSet<ActionKind>,
}

impl PlatformProfile {
    pub fn new(name: Platform) -> Self {
        let mut allowed: BTreeSet<ActionKind> = ActionKind::SHARED.into_iter().collect();
        match name {
            Platform::Shared => {}
            Platform::Desktop => allowed.extend(ActionKind::DESKTOP_EXTRA),
            Platform::Mobile => allowed.extend(ActionKind::MOBILE_EXTRA),
        }
        Self { name, allowed }
    }

    pub fn shared() -> Self {
        Self::new(Platform::Shared)
    }

    pub fn desktop() -> Self {
        Self::new(Platform::Desktop)
    }

    pub fn mobile() -> Self {
        Self::new(Platform::Mobile)
    }

    pub fn name(&self) -> Platform {
        self.name
    }

    pub fn allows(&self, kind: ActionKind) -> bool {
        self.allowed.contains(&kind)
    }

    pub fn kinds(&self) -> impl Iterator<Item = ActionKind> + '_ {
        self.allowed.iter().copied()
    }

    pub fn check(&self, action: &Action) -> Result<(), ActionError> {
        let kind = action.kind();
        if self.allows(kind) {
            Ok(())
        } else {
            Err(ActionError::Platform {
                kind,
                platform: self.name,
            })
        }
    }
}

impl From<Platform> for PlatformProfile {
    fn from(p: Platform) -> Self {
        PlatformProfile::new(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Click(NormPoint),
    Drag(NormPoint, NormPoint),
    Scroll(NormPoint, ScrollDirection),
    Type(String),
    Wait,
    Finished,
    CallUser,
    Hotkey(String),
    LeftDouble(NormPoint),
    RightSingle(NormPoint),
    LongPress(NormPoint),
    PressBack,
    PressHome,
    PressEnter,
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Click(_) => ActionKind::Click,
            Action::Drag(..) => ActionKind::Drag,
            Action::Scroll(..) => ActionKind::Scroll,
            Action::Type(_) => ActionKind::Type,
            Action::Wait => ActionKind::Wait,
            Action::Finished => ActionKind::Finished,
            Action::CallUser => ActionKind::CallUser,
            Action::Hotkey(_) => ActionKind::Hotkey,
            Action::LeftDouble(_) => ActionKind::LeftDouble,
            Action::RightSingle(_) => ActionKind::RightSingle,
            Action::LongPress(_) => ActionKind::LongPress,
            Action::PressBack => ActionKind::PressBack,
            Action::PressHome => ActionKind::PressHome,
            Action::PressEnter => ActionKind::PressEnter,
        }
    }

    /// Convenience constructor for a click; panics on out-of-range input.
    pub fn click(x: f64, y: f64) -> Action {
        Action::Click(NormPoint::new(x, y).expect("click coordinates in [0, 1]"))
    }

    /// The point an action is aimed at, if any. For drags this is the start.
    pub fn target_point(&self) -> Option<NormPoint> {
        match self {
            Action::Click(p)
            | Action::LeftDouble(p)
            | Action::RightSingle(p)
            | Action::LongPress(p)
            | Action::Scroll(p, _)
            | Action::Drag(p, _) => Some(*p),
            _ => None,
        }
    }

    /// The action with every coordinate snapped to wire precision.
    pub fn canonical(&self) -> Action {
        match self {
            Action::Click(p) => Action::Click(p.quantized()),
            Action::Drag(a, b) => Action::Drag(a.quantized(), b.quantized()),
            Action::Scroll(p, d) => Action::Scroll(p.quantized(), *d),
            Action::LeftDouble(p) => Action::LeftDouble(p.quantized()),
            Action::RightSingle(p) => Action::RightSingle(p.quantized()),
            Action::LongPress(p) => Action::LongPress(p.quantized()),
            other => other.clone(),
        }
    }

    /// Canonical single-line text form.
    pub fn serialize(&self) -> String {
        self.to_string()
    }
}

fn write_point(f: &mut fmt::Formatter<'_>, p: &NormPoint) -> fmt::Result {
    write!(f, "{:.4}, {:.4}", p.x, p.y)
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            '\r' => f.write_str("\\r")?,
            '\t' => f.write_str("\\t")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.kind().name())?;
        match self {
            Action::Click(p)
            | Action::LeftDouble(p)
            | Action::RightSingle(p)
            | Action::LongPress(p) => write_point(f, p)?,
            Action::Drag(a, b) => {
                write_point(f, a)?;
                f.write_str(", ")?;
                write_point(f, b)?;
            }
            Action::Scroll(p, d) => {
                write_point(f, p)?;
                write!(f, ", {}", d.as_str())?;
            }
            Action::Type(s) | Action::Hotkey(s) => write_quoted(f, s)?,
            Action::Wait
            | Action::Finished
            | Action::CallUser
            | Action::PressBack
            | Action::PressHome
            | Action::PressEnter => {}
        }
        f.write_str(")")
    }
}

/// Parses one line of policy output into an action and checks it against the
/// platform profile.
pub fn parse_action(text: &str, profile: &PlatformProfile) -> Result<Action, ActionError> {
    let action = parse_unchecked(text)?;
    profile.check(&action)?;
    Ok(action)
}

/// Parses without any platform restriction.
impl FromStr for Action {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_unchecked(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Arg {
    Bare(String),
    Quoted(String),
}

impl Arg {
    fn coord(&self) -> Result<f64, ActionError> {
        match self {
            Arg::Bare(tok) => {
                let bad = || ActionError::Syntax(format!("expected a number, found `{tok}`"));
                let starts_ok = tok
                    .chars()
                    .next()
                    .is_some_and(|c| c.is_ascii_digit() || c == '-' || c == '+' || c == '.');
                if !starts_ok {
                    return Err(bad());
                }
                let v: f64 = tok.parse().map_err(|_| bad())?;
                if !v.is_finite() {
                    return Err(bad());
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(ActionError::Range(v));
                }
                Ok(v)
            }
            Arg::Quoted(s) => Err(ActionError::Syntax(format!(
                "expected a number, found string \"{s}\""
            ))),
        }
    }

    fn text(&self, allow_bare: bool) -> Result<String, ActionError> {
        let s = match self {
            Arg::Quoted(s) => s.clone(),
            Arg::Bare(s) if allow_bare => s.clone(),
            Arg::Bare(s) => {
                return Err(ActionError::Syntax(format!(
                    "expected a quoted string, found `{s}`"
                )))
            }
        };
        if s.is_empty() {
            return Err(ActionError::Syntax("empty text argument".into()));
        }
        Ok(s)
    }
}

fn split_args(inner: &str) -> Result<Vec<Arg>, ActionError> {
    let mut args = Vec::new();
    let mut chars = inner.chars().peekable();
    let skip_ws = |chars: &mut std::iter::Peekable<std::str::Chars<'_>>| {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
    };
    skip_ws(&mut chars);
    if chars.peek().is_none() {
        return Ok(args);
    }
    loop {
        skip_ws(&mut chars);
        match chars.peek() {
            Some('"') => {
                chars.next();
                let mut s = String::new();
                loop {
                    match chars.next() {
                        None => return Err(ActionError::Syntax("unterminated string".into())),
                        Some('"') => break,
                        Some('\\') => match chars.next() {
                            Some('"') => s.push('"'),
                            Some('\\') => s.push('\\'),
                            Some('n') => s.push('\n'),
                            Some('r') => s.push('\r'),
                            Some('t') => s.push('\t'),
                            Some(c) => {
                                return Err(ActionError::Syntax(format!("unknown escape `\\{c}`")))
                            }
                            None => return Err(ActionError::Syntax("unterminated string".into())),
                        },
                        Some(c) => s.push(c),
                    }
                }
                args.push(Arg::Quoted(s));
            }
            Some(_) => {
                let mut tok = String::new();
                while let Some(&c) = chars.peek() {
                    if c == ',' {
                        break;
                    }
                    if c == '"' || c == '(' || c == ')' {
                        return Err(ActionError::Syntax(format!("unexpected `{c}` in argument")));
                    }
                    tok.push(c);
                    chars.next();
                }
                let tok = tok.trim().to_string();
                if tok.is_empty() {
                    return Err(ActionError::Syntax("empty argument".into()));
                }
                if tok.contains(char::is_whitespace) {
                    return Err(ActionError::Syntax(format!("missing comma in `{tok}`")));
                }
                args.push(Arg::Bare(tok));
            }
            None => return Err(ActionError::Syntax("trailing comma".into())),
        }
        skip_ws(&mut chars);
        match chars.next() {
            None => return Ok(args),
            Some(',') => continue,
            Some(c) => {
                return Err(ActionError::Syntax(format!(
                    "expected `,` between arguments, found `{c}`"
                )))
            }
        }
    }
}

fn parse_unchecked(text: &str) -> Result<Action, ActionError> {
    let s = text.trim();
    if s.contains('\n') || s.contains('\r') {
        return Err(ActionError::Syntax("action must be a single line".into()));
    }
    let open = s
        .find('(')
        .ok_or_else(|| ActionError::Syntax(format!("expected `Kind(...)`, found `{s}`")))?;
    let name = s[..open].trim_end();
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(ActionError::Syntax(format!("invalid action name `{name}`")));
    }
    if !s.ends_with(')') {
        return Err(ActionError::Syntax("missing closing `)`".into()));
    }
    let kind =
        ActionKind::from_name(name).ok_or_else(|| ActionError::UnknownAction(name.into()))?;
    let args = split_args(&s[open + 1..s.len() - 1])?;
    if args.len() != kind.arity() {
        return Err(ActionError::Arity {
            kind,
            expected: kind.arity(),
            found: args.len(),
        });
    }
    let point = |i: usize| -> Result<NormPoint, ActionError> {
        NormPoint::new(args[i].coord()?, args[i + 1].coord()?)
    };
    let action = match kind {
        ActionKind::Click => Action::Click(point(0)?),
        ActionKind::LeftDouble => Action::LeftDouble(point(0)?),
        ActionKind::RightSingle => Action::RightSingle(point(0)?),
        ActionKind::LongPress => Action::LongPress(point(0)?),
        ActionKind::Drag => Action::Drag(point(0)?, point(2)?),
        ActionKind::Scroll => {
            let dir = match &args[2] {
                Arg::Bare(tok) => tok.parse()?,
                Arg::Quoted(s) => {
                    return Err(ActionError::Syntax(format!(
                        "scroll direction must be bare, found \"{s}\""
                    )))
                }
            };
            Action::Scroll(point(0)?, dir)
        }
        ActionKind::Type => Action::Type(args[0].text(false)?),
        ActionKind::Hotkey => Action::Hotkey(args[0].text(true)?),
        ActionKind::Wait => Action::Wait,
        ActionKind::Finished => Action::Finished,
        ActionKind::CallUser => Action::CallUser,
        ActionKind::PressBack => Action::PressBack,
        ActionKind::PressHome => Action::PressHome,
        ActionKind::PressEnter => Action::PressEnter,
    };
    Ok(action)
}

const MODIFIERS: [&str; 4] = ["ctrl", "alt", "shift", "meta"];

/// Lowercases a hotkey, trims the parts and puts modifiers first in a fixed
/// order (`ctrl`, `alt`, `shift`, `meta`). `"Shift+Ctrl+T"` becomes
/// `"ctrl+shift+t"`.
pub fn normalize_hotkey(key: &str) -> String {
    let parts: Vec<String> = key
        .split('+')
        .map(|p| p.trim().to_lowercase())
        .filter(|p| !p.is_empty())
        .map(|p| match p.as_str() {
            "control" => "ctrl".to_string(),
            "cmd" | "command" | "win" | "super" => "meta".to_string(),
            _ => p,
        })
        .collect();
    let mut out: Vec<&str> = MODIFIERS
        .iter()
        .copied()
        .filter(|m| parts.iter().any(|p| p == m))
        .collect();
    out.extend(
        parts
            .iter()
            .map(String::as_str)
            .filter(|p| !MODIFIERS.contains(p)),
    );
    out.join("+")
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
