//! Two-arm 2-D packing simulator, scripted experts and demonstration datasets.
//!
//! The world is the unit square. Items rest at random separated positions,
//! the container sits near the top edge, and each arm is a point gripper
//! with a binary grip. Subtasks move one item into the container (or close
//! its lid with both arms); the oracle in [`Sim::is_subtask_complete`] is the
//! only source of ground truth and is never part of a policy's input.

mod dataset;
mod plan;
mod world;

pub use dataset::{
    derive_seed, label_frames, manifest_path, Dataset, DatasetKind, Episode, Frame, GenConfig,
    Manifest, DEFAULT_MAX_EXPERT_STEPS, DEFAULT_TAIL_FRAMES, MAX_REJECTION_RATE,
};
pub use plan::{Arm, Goal, SubtaskSpec, Target, TaskPlan};
pub use world::{
    dist, state_dim, Action, ArmState, ItemState, Sim, SimConstants, StepEvent, WorldState,
    ACTION_DIM,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("unknown plan `{0}` (expected salad or candy)")]
    UnknownPlan(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("expert never completed the subtask")]
    NeverCompleted,
    #[error("oracle already true at the first frame")]
    DegenerateEpisode,
    #[error("expert failed on {rejected} of {attempted} attempts")]
    ExpertFailure { rejected: usize, attempted: usize },
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
}
