//! Core of the unified GUI agent toolkit: the cross-platform action grammar,
//! a symbolic GUI simulator with oracles, the observe/think/act loop, trace
//! persistence, thought augmentation, filtering, reflection pairs, a tabular
//! DPO optimizer, evaluation and the online bootstrapping loop.

pub mod action;
pub mod agent;
pub mod augment;
pub mod bootstrap;
pub mod dpo;
pub mod eval;
pub mod filter;
pub mod hashing;
pub mod reflection;
pub mod sim;
pub mod store;

pub use action::{
    denormalize_point, normalize_hotkey, normalize_point, parse_action, Action, ActionError,
    ActionKind, NormPoint, PixelPoint, Platform, PlatformProfile, ScreenDims, ScrollDirection,
};
pub use agent::{
    parse_policy_output, run_episode, window_context, Environment, EpisodeConfig, PolicyClient,
    PolicyError, PolicyProvider, PromptContext, Step, Termination, Trace,
};
pub use sim::{Observation, SimEnv, Task, TaskRegistry};
pub use store::TraceStore;
