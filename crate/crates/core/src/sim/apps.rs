//! The bundled mock apps. Each app renders its full state into elements, so
//! the observation digest determines the app state within a task.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BBox, Element, ElementType, SimError, Task};
use crate::action::{normalize_hotkey, Action, ScrollDirection};

/// What the oracle wants to do next, in element terms.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Move {
    Click(String),
    Type(String),
    Hotkey(String),
    PressBack,
    Scroll(String, ScrollDirection),
    /// The goal cannot be reached from here any more.
    GiveUp,
}

#[derive(Debug, Clone)]
pub(crate) struct Plan {
    pub mv: Move,
    pub note: String,
}

impl Plan {
    fn new(mv: Move, note: impl Into<String>) -> Self {
        Self {
            mv,
            note: note.into(),
        }
    }
}

pub(crate) trait App: Send {
    fn elements(&self) -> Vec<Element>;
    fn handle(&mut self, action: &Action, hit: Option<&str>);
    fn goal(&self, goal: &str) -> Result<bool, SimError>;
    /// Next step towards the goal. Only meaningful while the goal is unmet.
    fn plan(&self) -> Plan;
    /// Count of sub-goals currently achieved, used to spot milestones.
    fn progress(&self) -> usize;
}

pub(crate) const APPS: [&str; 4] = ["form", "settings", "files", "browser"];

pub(crate) fn build(task: &Task) -> Result<Box<dyn App>, SimError> {
    match task.app.as_str() {
        "form" => Ok(Box::new(FormApp::new(task)?)),
        "settings" => Ok(Box::new(SettingsApp::new(task)?)),
        "files" => Ok(Box::new(FilesApp::new(task)?)),
        "browser" => Ok(Box::new(BrowserApp::new(task)?)),
        other => Err(SimError::UnknownApp(other.to_string())),
    }
}

/// Goal ids understood by each app.
pub(crate) fn goals_for(app: &str) -> &'static [&'static str] {
    match app {
        "form" => &["form_submitted"],
        "settings" => &["toggles_match"],
        "files" => &["file_deleted", "file_renamed"],
        "browser" => &["sites_bookmarked"],
        _ => &[],
    }
}

fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
    BBox::new(x0, y0, x1, y1).expect("static layout box")
}

fn title_box() -> BBox {
    bx(0.08, 0.02, 0.92, 0.10)
}

fn row(i: usize) -> BBox {
    let y0 = 0.14 + 0.09 * i as f64;
    bx(0.08, y0, 0.92, y0 + 0.07)
}

fn button(col: usize) -> BBox {
    let x0 = 0.08 + 0.22 * col as f64;
    bx(x0, 0.86, x0 + 0.18, 0.94)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn is_pointer(action: &Action) -> bool {
    matches!(
        action,
        Action::Click(_) | Action::LeftDouble(_) | Action::LongPress(_)
    )
}

fn parse_bool(task: &Task, key: &str, v: &str) -> Result<bool, SimError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(SimError::BadParams(format!(
            "{}: `{key}` must be true or false, got `{other}`",
            task.task_id
        ))),
    }
}

fn rng_for(task: &Task) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::hashing::derive_seed(task.seed, &[&task.app]))
}

// ---------------------------------------------------------------------------
// Form filler
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FormScreen {
    Form,
    Confirmation,
}

struct FormApp {
    fields: Vec<String>,
    targets: BTreeMap<String, String>,
    values: BTreeMap<String, String>,
    focused: Option<String>,
    selected_all: bool,
    agree: Option<(bool, bool)>,
    screen: FormScreen,
    submitted: Option<(BTreeMap<String, String>, bool)>,
}

impl FormApp {
    fn new(task: &Task) -> Result<Self, SimError> {
        let mut fields: Vec<String> = task
            .param("fields")?
            .split(',')
            .map(|f| f.trim().to_string())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.is_empty() {
            return Err(SimError::BadParams(format!(
                "{}: no form fields",
                task.task_id
            )));
        }
        let mut targets = BTreeMap::new();
        for f in &fields {
            targets.insert(f.clone(), task.param(f)?.to_string());
        }
        let agree = match task.params.get("agree") {
            Some(v) => Some((false, parse_bool(task, "agree", v)?)),
            None => None,
        };
        fields.shuffle(&mut rng_for(task));
        let focused = match task.params.get("prefocus") {
            Some(f) if targets.contains_key(f) => Some(f.clone()),
            Some(f) => {
                return Err(SimError::BadParams(format!(
                    "{}: prefocus field `{f}` unknown",
                    task.task_id
                )))
            }
            None => None,
        };
        let values = fields.iter().map(|f| (f.clone(), String::new())).collect();
        Ok(Self {
            fields,
            targets,
            values,
            focused,
            selected_all: false,
            agree,
            screen: FormScreen::Form,
            submitted: None,
        })
    }

    fn agree_ok(&self, checked: bool) -> bool {
        self.agree.is_none_or(|(_, want)| checked == want)
    }
}

impl App for FormApp {
    fn elements(&self) -> Vec<Element> {
        let mut els = Vec::new();
        match self.screen {
            FormScreen::Form => {
                els.push(Element::new(
                    "title",
                    ElementType::Label,
                    title_box(),
                    "Form",
                ));
                for (i, f) in self.fields.iter().enumerate() {
                    let r = row(i);
                    els.push(Element::new(
                        format!("{f}_label"),
                        ElementType::Label,
                        bx(r.x0, r.y0, 0.30, r.y1),
                        capitalize(f),
                    ));
                    let focused = self.focused.as_deref() == Some(f);
                    els.push(
                        Element::new(
                            f.clone(),
                            ElementType::TextField,
                            bx(0.32, r.y0, r.x1, r.y1),
                            self.values[f].clone(),
                        )
                        .with_state("focused", focused)
                        .with_state("selected", focused && self.selected_all),
                    );
                }
                if let Some((checked, _)) = self.agree {
                    els.push(
                        Element::new(
                            "agree",
                            ElementType::Checkbox,
                            row(self.fields.len()),
                            "I agree to the terms",
                        )
                        .with_state("checked", checked),
                    );
                }
                els.push(Element::new(
                    "submit",
                    ElementType::Button,
                    button(0),
                    "Submit",
                ));
                els.push(Element::new(
                    "clear",
                    ElementType::Button,
                    button(2),
                    "Clear",
                ));
            }
            FormScreen::Confirmation => {
                let (values, agreed) = self.submitted.as_ref().expect("submitted form");
                els.push(Element::new(
                    "title",
                    ElementType::Label,
                    title_box(),
                    "Submitted",
                ));
                for (i, f) in self.fields.iter().enumerate() {
                    els.push(Element::new(
                        format!("{f}_value"),
                        ElementType::Label,
                        row(i),
                        format!("{}: {}", capitalize(f), values[f]),
                    ));
                }
                if self.agree.is_some() {
                    els.push(
                        Element::new(
                            "agree_value",
                            ElementType::Label,
                            row(self.fields.len()),
                            "Terms",
                        )
                        .with_state("checked", agreed),
                    );
                }
                els.push(Element::new("edit", ElementType::Button, button(0), "Edit"));
            }
        }
        els
    }

    fn handle(&mut self, action: &Action, hit: Option<&str>) {
        match (self.screen, action) {
            (FormScreen::Form, Action::Type(s)) => {
                if let Some(f) = &self.focused {
                    let v = self.values.get_mut(f).expect("field");
                    if self.selected_all {
                        *v = s.clone();
                    } else {
                        v.push_str(s);
                    }
                    self.selected_all = false;
                }
            }
            (FormScreen::Form, Action::Hotkey(k)) => {
                if normalize_hotkey(k) == "ctrl+a" {
                    if let Some(f) = &self.focused {
                        self.selected_all = !self.values[f].is_empty();
                    }
                }
            }
            (FormScreen::Form, a) if is_pointer(a) => {
                let Some(id) = hit else { return };
                if self.values.contains_key(id) {
                    if self.focused.as_deref() != Some(id) {
                        self.selected_all = false;
                    }
                    self.focused = Some(id.to_string());
                    return;
                }
                if !matches!(a, Action::Click(_)) {
                    return;
                }
                match id {
                    "agree" => {
                        if let Some((checked, _)) = &mut self.agree {
                            *checked = !*checked;
                        }
                    }
                    "submit" => {
                        if self.values.values().all(|v| !v.is_empty()) {
                            let agreed = self.agree.map(|(c, _)| c).unwrap_or(false);
                            self.submitted = Some((self.values.clone(), agreed));
                            self.screen = FormScreen::Confirmation;
                            self.focused = None;
                            self.selected_all = false;
                        }
                    }
                    "clear" => {
                        for v in self.values.values_mut() {
                            v.clear();
                        }
                        self.selected_all = false;
                    }
                    _ => {
                        self.focused = None;
                        self.selected_all = false;
                    }
                }
            }
            (FormScreen::Confirmation, Action::Click(_)) if hit == Some("edit") => {
                self.screen = FormScreen::Form;
            }
            _ => {}
        }
    }

    fn goal(&self, goal: &str) -> Result<bool, SimError> {
        if goal != "form_submitted" {
            return Err(SimError::UnknownGoal(goal.to_string()));
        }
        Ok(self.screen == FormScreen::Confirmation
            && self
                .submitted
                .as_ref()
                .is_some_and(|(v, agreed)| *v == self.targets && self.agree_ok(*agreed)))
    }

    fn plan(&self) -> Plan {
        if self.screen == FormScreen::Confirmation {
            return Plan::new(
                Move::Click("edit".into()),
                "The submitted values are not the requested ones, so go back to edit the form.",
            );
        }
        for f in &self.fields {
            let want = &self.targets[f];
            let have = &self.values[f];
            if have == want {
                continue;
            }
            let name = capitalize(f);
            if self.focused.as_deref() != Some(f.as_str()) {
                return Plan::new(Move::Click(f.clone()), format!("Click the {name} field."));
            }
            if have.is_empty() || self.selected_all {
                return Plan::new(
                    Move::Type(want.clone()),
                    format!("Type \"{want}\" into the {name} field."),
                );
            }
            return Plan::new(
                Move::Hotkey("ctrl+a".into()),
                format!(
                    "The {name} field holds the wrong text; select it all so it can be replaced."
                ),
            );
        }
        if let Some((checked, want)) = self.agree {
            if checked != want {
                return Plan::new(Move::Click("agree".into()), "Set the terms checkbox.");
            }
        }
        Plan::new(
            Move::Click("submit".into()),
            "Every field is filled in; click Submit.",
        )
    }

    fn progress(&self) -> usize {
        let filled = self
            .fields
            .iter()
            .filter(|f| self.values[*f] == self.targets[*f])
            .count();
        let agree = self.agree.map_or(0, |(c, w)| usize::from(c == w));
        filled + agree
    }
}

// ---------------------------------------------------------------------------
// Settings toggles
// ---------------------------------------------------------------------------

const SECTIONS: [(&str, [&str; 3]); 3] = [
    ("network", ["wifi", "bluetooth", "airplane_mode"]),
    ("display", ["dark_mode", "night_light", "auto_rotate"]),
    ("sound", ["mute", "vibrate", "do_not_disturb"]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SettingsScreen {
    Main,
    Section(usize),
}

struct SettingsApp {
    toggles: BTreeMap<&'static str, bool>,
    targets: Vec<(&'static str, bool)>,
    screen: SettingsScreen,
}

fn toggle_name(name: &str) -> Option<&'static str> {
    SECTIONS
        .iter()
        .flat_map(|(_, t)| t.iter())
        .copied()
        .find(|t| *t == name)
}

fn section_of(toggle: &str) -> usize {
    SECTIONS
        .iter()
        .position(|(_, t)| t.contains(&toggle))
        .expect("known toggle")
}

impl SettingsApp {
    fn new(task: &Task) -> Result<Self, SimError> {
        let mut rng = rng_for(task);
        let mut toggles = BTreeMap::new();
        for (_, names) in SECTIONS {
            for n in names {
                toggles.insert(n, rng.random_bool(0.5));
            }
        }
        let mut targets = Vec::new();
        for (k, v) in &task.params {
            if let Some(init) = k.strip_prefix("init.") {
                let name = toggle_name(init).ok_or_else(|| {
                    SimError::BadParams(format!("{}: unknown toggle `{init}`", task.task_id))
                })?;
                toggles.insert(name, parse_bool(task, k, v)?);
            } else {
                let name = toggle_name(k).ok_or_else(|| {
                    SimError::BadParams(format!("{}: unknown toggle `{k}`", task.task_id))
                })?;
                targets.push((name, parse_bool(task, k, v)?));
            }
        }
        // Work through targets in on-screen order.
        targets.sort_by_key(|(n, _)| {
            let s = section_of(n);
            (s, SECTIONS[s].1.iter().position(|t| t == n))
        });
        Ok(Self {
            toggles,
            targets,
            screen: SettingsScreen::Main,
        })
    }

    fn first_mismatch(&self) -> Option<&'static str> {
        self.targets
            .iter()
            .find(|(n, want)| self.toggles[n] != *want)
            .map(|(n, _)| *n)
    }
}

impl App for SettingsApp {
    fn elements(&self) -> Vec<Element> {
        let onoff = |b: bool| if b { "on" } else { "off" };
        let mut els = Vec::new();
        match self.screen {
            SettingsScreen::Main => {
                els.push(Element::new(
                    "title",
                    ElementType::Label,
                    title_box(),
                    "Settings",
                ));
                for (i, (sec, names)) in SECTIONS.iter().enumerate() {
                    let mut e = Element::new(
                        format!("section:{sec}"),
                        ElementType::ListItem,
                        row(i),
                        capitalize(sec),
                    );
                    for n in names {
                        e = e.with_state(n, onoff(self.toggles[n]));
                    }
                    els.push(e);
                }
            }
            SettingsScreen::Section(s) => {
                let (sec, names) = SECTIONS[s];
                els.push(Element::new(
                    "title",
                    ElementType::Label,
                    title_box(),
                    capitalize(sec),
                ));
                for (i, n) in names.iter().enumerate() {
                    els.push(
                        Element::new(
                            format!("toggle:{n}"),
                            ElementType::Checkbox,
                            row(i),
                            n.replace('_', " "),
                        )
                        .with_state("checked", self.toggles[n]),
                    );
                }
                els.push(Element::new("back", ElementType::Button, button(0), "Back"));
            }
        }
        els
    }

    fn handle(&mut self, action: &Action, hit: Option<&str>) {
        match action {
            Action::PressBack | Action::PressHome => self.screen = SettingsScreen::Main,
            Action::Click(_) => {
                let Some(id) = hit else { return };
                match self.screen {
                    SettingsScreen::Main => {
                        if let Some(sec) = id.strip_prefix("section:") {
                            if let Some(i) = SECTIONS.iter().position(|(s, _)| *s == sec) {
                                self.screen = SettingsScreen::Section(i);
                            }
                        }
                    }
                    SettingsScreen::Section(_) => {
                        if id == "back" {
                            self.screen = SettingsScreen::Main;
                        } else if let Some(n) = id.strip_prefix("toggle:").and_then(toggle_name) {
                            let v = self.toggles.get_mut(n).expect("toggle");
                            *v = !*v;
                        }
                    }
                }
            }
            _ => {}
        }
    }

    fn goal(&self, goal: &str) -> Result<bool, SimError> {
        if goal != "toggles_match" {
            return Err(SimError::UnknownGoal(goal.to_string()));
        }
        Ok(self.first_mismatch().is_none())
    }

    fn plan(&self) -> Plan {
        let Some(next) = self.first_mismatch() else {
            return Plan::new(Move::GiveUp, "Nothing left to change.");
        };
        let sec = section_of(next);
        match self.screen {
            SettingsScreen::Main => Plan::new(
                Move::Click(format!("section:{}", SECTIONS[sec].0)),
                format!("Open the {} section.", capitalize(SECTIONS[sec].0)),
            ),
            SettingsScreen::Section(s) if s == sec => Plan::new(
                Move::Click(format!("toggle:{next}")),
                format!(
                    "Switch {} {}.",
                    next.replace('_', " "),
                    if self.toggles[next] { "off" } else { "on" }
                ),
            ),
            SettingsScreen::Section(_) => {
                Plan::new(Move::PressBack, "Nothing more to change here; go back.")
            }
        }
    }

    fn progress(&self) -> usize {
        self.targets
            .iter()
            .filter(|(n, w)| self.toggles[n] == *w)
            .count()
    }
}

// ---------------------------------------------------------------------------
// Two-screen file manager
// ---------------------------------------------------------------------------

const FOLDERS: [(&str, [&str; 10]); 3] = [
    (
        "documents",
        [
            "report.pdf",
            "budget.xlsx",
            "notes.txt",
            "resume.docx",
            "minutes.md",
            "plan.txt",
            "invoice.pdf",
            "draft.docx",
            "todo.txt",
            "letter.doc",
        ],
    ),
    (
        "pictures",
        [
            "beach.jpg",
            "cat.png",
            "dog.png",
            "sunset.jpg",
            "family.jpg",
            "receipt.png",
            "mountain.jpg",
            "city.png",
            "forest.jpg",
            "party.jpg",
        ],
    ),
    (
        "downloads",
        [
            "setup.exe",
            "song.mp3",
            "archive.zip",
            "paper.pdf",
            "video.mp4",
            "driver.msi",
            "font.ttf",
            "data.csv",
            "slides.pptx",
            "game.iso",
        ],
    ),
];

const VISIBLE_ROWS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
enum FileMode {
    Browse,
    ConfirmDelete,
    Rename { input: String, selected_all: bool },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum FilesScreen {
    Folders,
    Folder {
        idx: usize,
        offset: usize,
        selected: Option<String>,
        mode: FileMode,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum FileTask {
    Delete,
    Rename(String),
}

struct FilesApp {
    files: Vec<Vec<String>>,
    initial: Vec<Vec<String>>,
    /// current name -> original name, for files renamed during the episode
    origin: BTreeMap<String, String>,
    screen: FilesScreen,
    target_folder: usize,
    target_file: String,
    job: FileTask,
}

impl FilesApp {
    fn new(task: &Task) -> Result<Self, SimError> {
        let folder = task.param("folder")?;
        let target_folder = FOLDERS
            .iter()
            .position(|(f, _)| *f == folder)
            .ok_or_else(|| {
                SimError::BadParams(format!("{}: unknown folder `{folder}`", task.task_id))
            })?;
        let target_file = task.param("file")?.to_string();
        let job = match task.goal.as_str() {
            "file_renamed" => FileTask::Rename(task.param("new_name")?.to_string()),
            _ => FileTask::Delete,
        };
        let mut rng = rng_for(task);
        let mut files = Vec::new();
        for (i, (_, pool)) in FOLDERS.iter().enumerate() {
            let count = rng.random_range(6..=8);
            let mut names: Vec<String> = pool.iter().map(|s| s.to_string()).collect();
            names.shuffle(&mut rng);
            names.truncate(count);
            if i == target_folder {
                if !names.contains(&target_file) {
                    let slot = rng.random_range(0..names.len());
                    names[slot] = target_file.clone();
                }
                if task.params.get("position").map(String::as_str) == Some("last") {
                    names.retain(|n| n != &target_file);
                    names.push(target_file.clone());
                }
            }
            files.push(names);
        }
        Ok(Self {
            initial: files.clone(),
            files,
            origin: BTreeMap::new(),
            screen: FilesScreen::Folders,
            target_folder,
            target_file,
            job,
        })
    }

    /// Current on-disk name of the target file, following renames.
    fn target_current(&self) -> Option<String> {
        self.files[self.target_folder]
            .iter()
            .find(|n| self.origin.get(*n).unwrap_or(n) == &self.target_file)
            .cloned()
    }

    fn others_intact(&self, skip_target: bool) -> bool {
        self.initial.iter().enumerate().all(|(fi, names)| {
            names.iter().all(|n| {
                (skip_target && fi == self.target_folder && n == &self.target_file)
                    || self.files[fi].contains(n)
            })
        })
    }
}

fn list_area() -> BBox {
    bx(0.08, 0.14, 0.92, 0.59)
}

impl App for FilesApp {
    fn elements(&self) -> Vec<Element> {
        let mut els = Vec::new();
        match &self.screen {
            FilesScreen::Folders => {
                els.push(Element::new(
                    "title",
                    ElementType::Label,
                    title_box(),
                    "Files",
                ));
                for (i, (name, _)) in FOLDERS.iter().enumerate() {
                    els.push(
                        Element::new(
                            format!("folder:{name}"),
                            ElementType::ListItem,
                            row(i),
                            capitalize(name),
                        )
                        .with_state("items", self.files[i].len()),
                    );
                }
            }
            FilesScreen::Folder {
                idx,
                offset,
                selected,
                mode,
            } => {
                let names = &self.files[*idx];
                let end = (*offset + VISIBLE_ROWS).min(names.len());
                els.push(Element::new(
                    "title",
                    ElementType::Label,
                    title_box(),
                    capitalize(FOLDERS[*idx].0),
                ));
                els.push(Element::new(
                    "file_list",
                    ElementType::Label,
                    list_area(),
                    format!("showing {}-{} of {}", offset + 1, end, names.len()),
                ));
                for (r, name) in names[*offset..end].iter().enumerate() {
                    els.push(
                        Element::new(
                            format!("file:{name}"),
                            ElementType::ListItem,
                            row(r),
                            name.clone(),
                        )
                        .with_state("selected", selected.as_deref() == Some(name.as_str())),
                    );
                }
                els.push(Element::new("back", ElementType::Button, button(0), "Back"));
                els.push(Element::new(
                    "delete",
                    ElementType::Button,
                    button(1),
                    "Delete",
                ));
                els.push(Element::new(
                    "rename",
                    ElementType::Button,
                    button(2),
                    "Rename",
                ));
                match mode {
                    FileMode::Browse => {}
                    FileMode::ConfirmDelete => {
                        let sel = selected.as_deref().unwrap_or_default();
                        els.push(Element::new(
                            "dialog",
                            ElementType::Label,
                            bx(0.2, 0.35, 0.8, 0.65),
                            format!("Delete {sel}?"),
                        ));
                        els.push(Element::new(
                            "confirm",
                            ElementType::Button,
                            bx(0.25, 0.55, 0.45, 0.62),
                            "Delete",
                        ));
                        els.push(Element::new(
                            "cancel",
                            ElementType::Button,
                            bx(0.55, 0.55, 0.75, 0.62),
                            "Cancel",
                        ));
                    }
                    FileMode::Rename {
                        input,
                        selected_all,
                    } => {
                        els.push(Element::new(
                            "dialog",
                            ElementType::Label,
                            bx(0.2, 0.35, 0.8, 0.65),
                            "Rename",
                        ));
                        els.push(
                            Element::new(
                                "rename_input",
                                ElementType::TextField,
                                bx(0.25, 0.40, 0.75, 0.48),
                                input.clone(),
                            )
                            .with_state("focused", true)
                            .with_state("selected", *selected_all),
                        );
                        els.push(Element::new(
                            "save",
                            ElementType::Button,
                            bx(0.25, 0.55, 0.45, 0.62),
                            "Save",
                        ));
                        els.push(Element::new(
                            "cancel_rename",
                            ElementType::Button,
                            bx(0.55, 0.55, 0.75, 0.62),
                            "Cancel",
                        ));
                    }
                }
            }
        }
        els
    }

    fn handle(&mut self, action: &Action, hit: Option<&str>) {
        let FilesScreen::Folder {
            idx,
            offset,
            selected,
            mode,
        } = &mut self.screen
        else {
            if let (Action::Click(_), Some(id)) = (action, hit) {
                if let Some(name) = id.strip_prefix("folder:") {
                    if let Some(i) = FOLDERS.iter().position(|(f, _)| *f == name) {
                        self.screen = FilesScreen::Folder {
                            idx: i,
                            offset: 0,
                            selected: None,
                            mode: FileMode::Browse,
                        };
                    }
                }
            }
            return;
        };
        let idx = *idx;
        match mode {
            FileMode::ConfirmDelete => {
                if let (Action::Click(_), Some(id)) = (action, hit) {
                    match id {
                        "confirm" => {
                            if let Some(name) = selected.take() {
                                self.files[idx].retain(|n| n != &name);
                                self.origin.remove(&name);
                                let max_off = self.files[idx].len().saturating_sub(VISIBLE_ROWS);
                                *offset = (*offset).min(max_off);
                            }
                            *mode = FileMode::Browse;
                        }
                        "cancel" => *mode = FileMode::Browse,
                        _ => {}
                    }
                }
            }
            FileMode::Rename {
                input,
                selected_all,
            } => match action {
                Action::Type(s) => {
                    if *selected_all {
                        *input = s.clone();
                    } else {
                        input.push_str(s);
                    }
                    *selected_all = false;
                }
                Action::Hotkey(k) if normalize_hotkey(k) == "ctrl+a" => {
                    *selected_all = !input.is_empty();
                }
                Action::Click(_) => match hit {
                    Some("save") => {
                        let new = input.trim().to_string();
                        let taken = self.files[idx].contains(&new);
                        if let (false, false, Some(old)) = (new.is_empty(), taken, selected.clone())
                        {
                            if let Some(slot) = self.files[idx].iter_mut().find(|n| **n == old) {
                                *slot = new.clone();
                            }
                            let orig = self.origin.remove(&old).unwrap_or(old);
                            self.origin.insert(new.clone(), orig);
                            *selected = Some(new);
                            *mode = FileMode::Browse;
                        }
                    }
                    Some("cancel_rename") => *mode = FileMode::Browse,
                    _ => {}
                },
                _ => {}
            },
            FileMode::Browse => match action {
                Action::Scroll(p, dir) if list_area().contains(*p) => {
                    let max_off = self.files[idx].len().saturating_sub(VISIBLE_ROWS);
                    match dir {
                        ScrollDirection::Down => *offset = (*offset + 1).min(max_off),
                        ScrollDirection::Up => *offset = offset.saturating_sub(1),
                        _ => {}
                    }
                }
                Action::Click(_) => match hit {
                    Some("back") => self.screen = FilesScreen::Folders,
                    Some("delete") if selected.is_some() => *mode = FileMode::ConfirmDelete,
                    Some("rename") if selected.is_some() => {
                        *mode = FileMode::Rename {
                            input: String::new(),
                            selected_all: false,
                        }
                    }
                    Some(id) => {
                        if let Some(name) = id.strip_prefix("file:") {
                            *selected = Some(name.to_string());
                        }
                    }
                    None => {}
                },
                _ => {}
            },
        }
    }

    fn goal(&self, goal: &str) -> Result<bool, SimError> {
        match goal {
            "file_deleted" => Ok(!self.files[self.target_folder].contains(&self.target_file)
                && self.origin.values().all(|o| o != &self.target_file)
                && self.others_intact(true)),
            "file_renamed" => {
                let FileTask::Rename(new) = &self.job else {
                    return Ok(false);
                };
                Ok(self.files[self.target_folder].contains(new)
                    && self.origin.get(new) == Some(&self.target_file)
                    && self.others_intact(true))
            }
            other => Err(SimError::UnknownGoal(other.to_string())),
        }
    }

    fn plan(&self) -> Plan {
        let Some(current) = self.target_current() else {
            return Plan::new(Move::GiveUp, "The target file no longer exists.");
        };
        let folder_name = FOLDERS[self.target_folder].0;
        match &self.screen {
            FilesScreen::Folders => Plan::new(
                Move::Click(format!("folder:{folder_name}")),
                format!("Open the {} folder.", capitalize(folder_name)),
            ),
            FilesScreen::Folder {
                idx,
                offset,
                selected,
                mode,
            } => {
                let on_target = selected.as_deref() == Some(current.as_str());
                match mode {
                    FileMode::ConfirmDelete => {
                        if *idx == self.target_folder && on_target && self.job == FileTask::Delete {
                            Plan::new(
                                Move::Click("confirm".into()),
                                format!("Confirm deleting {current}."),
                            )
                        } else {
                            Plan::new(
                                Move::Click("cancel".into()),
                                "This deletion is wrong; cancel it.",
                            )
                        }
                    }
                    FileMode::Rename {
                        input,
                        selected_all,
                    } => match &self.job {
                        FileTask::Rename(new) if *idx == self.target_folder && on_target => {
                            if input == new {
                                Plan::new(
                                    Move::Click("save".into()),
                                    "The new name is entered; save it.",
                                )
                            } else if input.is_empty() || *selected_all {
                                Plan::new(
                                    Move::Type(new.clone()),
                                    format!("Type the new name \"{new}\"."),
                                )
                            } else {
                                Plan::new(
                                    Move::Hotkey("ctrl+a".into()),
                                    "The name box has the wrong text; select all of it.",
                                )
                            }
                        }
                        _ => Plan::new(
                            Move::Click("cancel_rename".into()),
                            "This rename is wrong; cancel it.",
                        ),
                    },
                    FileMode::Browse if *idx != self.target_folder => Plan::new(
                        Move::Click("back".into()),
                        "This is the wrong folder; go back.",
                    ),
                    FileMode::Browse => {
                        let pos = self.files[*idx]
                            .iter()
                            .position(|n| *n == current)
                            .expect("target in folder");
                        if pos < *offset {
                            Plan::new(
                                Move::Scroll("file_list".into(), ScrollDirection::Up),
                                format!("{current} is above the visible rows; scroll up to look for it."),
                            )
                        } else if pos >= offset + VISIBLE_ROWS {
                            Plan::new(
                                Move::Scroll("file_list".into(), ScrollDirection::Down),
                                format!(
                                    "{current} is not visible yet; scroll down to look for it."
                                ),
                            )
                        } else if !on_target {
                            Plan::new(
                                Move::Click(format!("file:{current}")),
                                format!("Select {current}."),
                            )
                        } else {
                            match self.job {
                                FileTask::Delete => {
                                    Plan::new(Move::Click("delete".into()), "Click Delete.")
                                }
                                FileTask::Rename(_) => {
                                    Plan::new(Move::Click("rename".into()), "Click Rename.")
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn progress(&self) -> usize {
        match &self.screen {
            FilesScreen::Folders => 0,
            FilesScreen::Folder {
                idx,
                selected,
                mode,
                ..
            } => {
                if *idx != self.target_folder {
                    return 0;
                }
                let sel = selected.is_some() && *selected == self.target_current();
                1 + usize::from(sel) + usize::from(sel && *mode != FileMode::Browse)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Browser with bookmarks
// ---------------------------------------------------------------------------

const SITES: [&str; 8] = [
    "news", "weather", "recipes", "maps", "music", "sports", "travel", "shopping",
];

#[derive(Debug, Clone, PartialEq, Eq)]
enum BrowserScreen {
    Home,
    Page(String),
    NoTabs(String),
}

struct BrowserApp {
    links: Vec<String>,
    bookmarks: BTreeSet<String>,
    targets: Vec<String>,
    screen: BrowserScreen,
}

impl BrowserApp {
    fn new(task: &Task) -> Result<Self, SimError> {
        let targets: Vec<String> = task
            .param("sites")?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        for t in &targets {
            if !SITES.contains(&t.as_str()) {
                return Err(SimError::BadParams(format!(
                    "{}: unknown site `{t}`",
                    task.task_id
                )));
            }
        }
        let mut rng = rng_for(task);
        let mut links: Vec<String> = SITES.iter().map(|s| s.to_string()).collect();
        links.shuffle(&mut rng);
        links.truncate(5);
        for t in &targets {
            if !links.contains(t) {
                let free = links
                    .iter()
                    .position(|l| !targets.contains(l))
                    .expect("five links, at most a few targets");
                links[free] = t.clone();
            }
        }
        Ok(Self {
            links,
            bookmarks: BTreeSet::new(),
            targets,
            screen: BrowserScreen::Home,
        })
    }

    fn remaining(&self) -> Vec<&String> {
        self.targets
            .iter()
            .filter(|t| !self.bookmarks.contains(*t))
            .collect()
    }
}

impl App for BrowserApp {
    fn elements(&self) -> Vec<Element> {
        let mut els = Vec::new();
        match &self.screen {
            BrowserScreen::Home => {
                els.push(Element::new(
                    "title",
                    ElementType::Label,
                    title_box(),
                    "Start page",
                ));
                for (i, l) in self.links.iter().enumerate() {
                    els.push(
                        Element::new(
                            format!("link:{l}"),
                            ElementType::ListItem,
                            row(i),
                            capitalize(l),
                        )
                        .with_state("bookmarked", self.bookmarks.contains(l)),
                    );
                }
            }
            BrowserScreen::Page(site) => {
                els.push(Element::new(
                    "home",
                    ElementType::Icon,
                    bx(0.02, 0.02, 0.10, 0.08),
                    "Home",
                ));
                els.push(Element::new(
                    "page_title",
                    ElementType::Label,
                    bx(0.12, 0.02, 0.78, 0.08),
                    capitalize(site),
                ));
                els.push(
                    Element::new(
                        "bookmark",
                        ElementType::Icon,
                        bx(0.80, 0.02, 0.88, 0.08),
                        "Bookmark",
                    )
                    .with_state("bookmarked", self.bookmarks.contains(site)),
                );
                els.push(Element::new(
                    "close_tab",
                    ElementType::Icon,
                    bx(0.90, 0.02, 0.98, 0.08),
                    "Close tab",
                ));
                els.push(Element::new(
                    "content",
                    ElementType::Label,
                    bx(0.02, 0.12, 0.98, 0.98),
                    format!("Welcome to {site}"),
                ));
            }
            BrowserScreen::NoTabs(last) => {
                els.push(Element::new(
                    "empty",
                    ElementType::Label,
                    bx(0.2, 0.3, 0.8, 0.5),
                    format!("No open tabs. Recently closed: {last}"),
                ));
                els.push(Element::new(
                    "new_tab",
                    ElementType::Button,
                    bx(0.4, 0.55, 0.6, 0.62),
                    "New tab",
                ));
            }
        }
        els
    }

    fn handle(&mut self, action: &Action, hit: Option<&str>) {
        match (&self.screen, action) {
            (BrowserScreen::NoTabs(last), Action::Hotkey(k))
                if normalize_hotkey(k) == "ctrl+shift+t" =>
            {
                self.screen = BrowserScreen::Page(last.clone());
            }
            (BrowserScreen::Page(_), Action::Hotkey(k)) if normalize_hotkey(k) == "alt+left" => {
                self.screen = BrowserScreen::Home;
            }
            (screen, Action::Click(_)) => {
                let Some(id) = hit else { return };
                match screen {
                    BrowserScreen::Home => {
                        if let Some(l) = id.strip_prefix("link:") {
                            self.screen = BrowserScreen::Page(l.to_string());
                        }
                    }
                    BrowserScreen::Page(site) => {
                        let site = site.clone();
                        match id {
                            "bookmark" => {
                                if !self.bookmarks.remove(&site) {
                                    self.bookmarks.insert(site);
                                }
                            }
                            "close_tab" => self.screen = BrowserScreen::NoTabs(site),
                            "home" => self.screen = BrowserScreen::Home,
                            _ => {}
                        }
                    }
                    BrowserScreen::NoTabs(_) => {
                        if id == "new_tab" {
                            self.screen = BrowserScreen::Home;
                        }
                    }
                }
            }
            _ => {}
        }
    }

    fn goal(&self, goal: &str) -> Result<bool, SimError> {
        if goal != "sites_bookmarked" {
            return Err(SimError::UnknownGoal(goal.to_string()));
        }
        Ok(self.remaining().is_empty())
    }

    fn plan(&self) -> Plan {
        let remaining = self.remaining();
        let Some(next) = remaining.first() else {
            return Plan::new(Move::GiveUp, "Everything is bookmarked.");
        };
        match &self.screen {
            BrowserScreen::Home => Plan::new(
                Move::Click(format!("link:{next}")),
                format!("Open the {} page.", capitalize(next)),
            ),
            BrowserScreen::Page(site) if remaining.contains(&site) => Plan::new(
                Move::Click("bookmark".into()),
                format!("Bookmark the {} page.", capitalize(site)),
            ),
            BrowserScreen::Page(_) => {
                Plan::new(Move::Click("home".into()), "Return to the start page.")
            }
            BrowserScreen::NoTabs(last) if remaining.contains(&last) => Plan::new(
                Move::Hotkey("ctrl+shift+t".into()),
                format!(
                    "The {} tab was closed by mistake; reopen it.",
                    capitalize(last)
                ),
            ),
            BrowserScreen::NoTabs(_) => Plan::new(Move::Click("new_tab".into()), "Open a new tab."),
        }
    }

    fn progress(&self) -> usize {
        let on_target =
            matches!(&self.screen, BrowserScreen::Page(s) if self.remaining().contains(&s));
        2 * (self.targets.len() - self.remaining().len()) + usize::from(on_target)
    }
}
