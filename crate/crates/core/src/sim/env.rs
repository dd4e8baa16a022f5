use super::apps::{self, App, Move, Plan};
use super::{Observation, SimError, Task};
use crate::action::{normalize_hotkey, Action, Platform, ScreenDims};
use crate::augment::ReasoningPattern;

/// Screen size reported for each platform.
pub fn screen_dims(platform: Platform) -> ScreenDims {
    match platform {
        Platform::Mobile => ScreenDims::new(1080, 2400),
        Platform::Desktop | Platform::Shared => ScreenDims::new(1920, 1080),
    }
}

/// The oracle's next move with a templated thought.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleStep {
    pub pattern: ReasoningPattern,
    pub thought: String,
    pub action: Action,
}

struct Running {
    task: Task,
    app: Box<dyn App>,
    dims: ScreenDims,
    steps: usize,
    /// The previous action was not what the oracle would have done.
    deviated: bool,
    /// The previous action completed a sub-goal.
    gained: bool,
}

/// One simulator instance. Single-threaded; create one per concurrent episode.
#[derive(Default)]
pub struct SimEnv {
    run: Option<Running>,
}

impl SimEnv {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts `task` from its seeded initial state.
    pub fn reset(&mut self, task: &Task) -> Result<Observation, SimError> {
        let app = apps::build(task)?;
        self.run = Some(Running {
            task: task.clone(),
            app,
            dims: screen_dims(task.platform),
            steps: 0,
            deviated: false,
            gained: false,
        });
        self.observe()
    }

    pub fn task(&self) -> Option<&Task> {
        self.run.as_ref().map(|r| &r.task)
    }

    pub fn observe(&self) -> Result<Observation, SimError> {
        let run = self.run.as_ref().ok_or(SimError::NotReset)?;
        Ok(Observation::new(run.dims, run.app.elements()))
    }

    /// Applies one action. Actions that hit nothing or have no meaning on the
    /// current screen leave the state untouched.
    pub fn apply_action(&mut self, action: &Action) -> Result<Observation, SimError> {
        let before = self.observe()?;
        let expected = match self.check_goal() {
            Ok(false) => Some(self.plan()?),
            _ => None,
        };
        let run = self.run.as_mut().ok_or(SimError::NotReset)?;
        let hit = action
            .target_point()
            .and_then(|p| before.hit_test(p))
            .map(|e| e.element_id.clone());
        let progress = run.app.progress();
        run.app.handle(action, hit.as_deref());
        run.gained = run.app.progress() > progress;
        run.deviated =
            expected.is_some_and(|plan| !move_matches(&plan.mv, action, hit.as_deref(), &before));
        run.steps += 1;
        self.observe()
    }

    pub fn check_goal(&self) -> Result<bool, SimError> {
        let run = self.run.as_ref().ok_or(SimError::NotReset)?;
        run.app.goal(&run.task.goal)
    }

    fn plan(&self) -> Result<Plan, SimError> {
        let run = self.run.as_ref().ok_or(SimError::NotReset)?;
        Ok(run.app.plan())
    }

    /// Next action on a shortest known path to the goal, tagged with the
    /// reasoning pattern it exemplifies.
    pub fn oracle_action(&self) -> Result<OracleStep, SimError> {
        if self.check_goal()? {
            return Err(SimError::GoalReached);
        }
        let run = self.run.as_ref().ok_or(SimError::NotReset)?;
        let plan = run.app.plan();
        let obs = self.observe()?;
        let action = match &plan.mv {
            Move::Click(id) => Action::Click(
                obs.element(id)
                    .ok_or_else(|| SimError::NoOracle(run.task.task_id.clone()))?
                    .bbox
                    .center(),
            ),
            Move::Scroll(id, dir) => Action::Scroll(
                obs.element(id)
                    .ok_or_else(|| SimError::NoOracle(run.task.task_id.clone()))?
                    .bbox
                    .center(),
                *dir,
            ),
            Move::Type(s) => Action::Type(s.clone()),
            Move::Hotkey(k) => Action::Hotkey(k.clone()),
            Move::PressBack => Action::PressBack,
            Move::GiveUp => Action::CallUser,
        };
        let pattern = if run.steps == 0 {
            ReasoningPattern::TaskDecomposition
        } else if run.deviated {
            ReasoningPattern::Reflection
        } else if matches!(plan.mv, Move::Scroll(..)) {
            ReasoningPattern::TrialAndError
        } else if run.gained {
            ReasoningPattern::MilestoneRecognition
        } else {
            ReasoningPattern::LongTermConsistency
        };
        let thought = compose_thought(pattern, &run.task.instruction, &plan.note);
        Ok(OracleStep {
            pattern,
            thought,
            action,
        })
    }

    /// The thought the oracle gives when it declares the task complete.
    pub fn completion_step(&self) -> OracleStep {
        OracleStep {
            pattern: ReasoningPattern::MilestoneRecognition,
            thought: format!(
                "[{}] Every requirement of \"{}\" is now met, so the task is complete.",
                ReasoningPattern::MilestoneRecognition.as_str(),
                self.task()
                    .map(|t| t.instruction.as_str())
                    .unwrap_or_default()
            ),
            action: Action::Finished,
        }
    }
}

fn compose_thought(pattern: ReasoningPattern, instruction: &str, note: &str) -> String {
    let lead = match pattern {
        ReasoningPattern::TaskDecomposition => {
            format!("The task \"{instruction}\" breaks down into a few small steps. First:")
        }
        ReasoningPattern::LongTermConsistency => {
            format!("Keeping the overall goal \"{instruction}\" in view, the next step is:")
        }
        ReasoningPattern::MilestoneRecognition => "That sub-goal is done. Next:".to_string(),
        ReasoningPattern::TrialAndError => {
            "I have not found it yet, so I will try something:".to_string()
        }
        ReasoningPattern::Reflection => {
            "The previous action did not do what was needed, so I have to correct it:".to_string()
        }
    };
    format!("[{}] {lead} {note}", pattern.as_str())
}

fn move_matches(mv: &Move, action: &Action, hit: Option<&str>, obs: &Observation) -> bool {
    match (mv, action) {
        (Move::Click(id), Action::Click(_)) => hit == Some(id.as_str()),
        (Move::Scroll(id, d), Action::Scroll(p, ad)) => {
            d == ad && obs.element(id).is_some_and(|e| e.bbox.contains(*p))
        }
        (Move::Type(s), Action::Type(a)) => s == a,
        (Move::Hotkey(k), Action::Hotkey(a)) => normalize_hotkey(k) == normalize_hotkey(a),
        (Move::PressBack, Action::PressBack) => true,
        (Move::GiveUp, Action::CallUser) => true,
        _ => false,
    }
}
