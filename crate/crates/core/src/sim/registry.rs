use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::apps;
use super::{SimError, Task};

const BUNDLED: &str = include_str!("../../tasks/bundled.toml");

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    #[serde(rename = "task", default)]
    tasks: Vec<Task>,
}

/// An ordered, validated list of tasks, loaded from TOML.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRegistry {
    tasks: Vec<Task>,
}

impl TaskRegistry {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let file: RegistryFile =
            toml::from_str(text).map_err(|e| SimError::Registry(e.to_string()))?;
        Self::from_tasks(file.tasks)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Registry(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Validates ids, apps, goals and parameters up front.
    pub fn from_tasks(tasks: Vec<Task>) -> Result<Self, SimError> {
        let mut seen = BTreeSet::new();
        for t in &tasks {
            if !seen.insert(t.task_id.as_str()) {
                return Err(SimError::Registry(format!(
                    "duplicate task id `{}`",
                    t.task_id
                )));
            }
            if !apps::APPS.contains(&t.app.as_str()) {
                return Err(SimError::UnknownApp(t.app.clone()));
            }
            if !apps::goals_for(&t.app).contains(&t.goal.as_str()) {
                return Err(SimError::UnknownGoal(t.goal.clone()));
            }
            if t.instruction.trim().is_empty() {
                return Err(SimError::Registry(format!(
                    "task `{}` has an empty instruction",
                    t.task_id
                )));
            }
            apps::build(t)?;
        }
        Ok(Self { tasks })
    }

    pub fn bundled() -> Self {
        Self::from_toml_str(BUNDLED).expect("bundled task registry is valid")
    }

    pub fn get(&self, task_id: &str) -> Result<&Task, SimError> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| SimError::UnknownTask(task_id.to_string()))
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&RegistryFile {
            tasks: self.tasks.clone(),
        })
        .expect("registry serializes")
    }
}

/// The bundled task suite.
pub fn bundled_tasks() -> Vec<Task> {
    TaskRegistry::bundled().tasks
}
