//! Finetuning strategies as freeze-mask and phase schedules over one shared
//! training loop.
//!
//! | strategy | phase 1                                   | phase 2                              |
//! |----------|-------------------------------------------|--------------------------------------|
//! | J        | all trainable, action + completion        |                                      |
//! | JF       | encoder frozen, action + completion       |                                      |
//! | S        | completion head frozen, action            | only completion head, completion     |
//! | SF       | encoder + completion head frozen, action  | only completion head, completion     |
//! | BASELINE | completion head frozen, action            |                                      |

mod bundle;
mod strategy;
mod trainer;

pub use bundle::{entry_stem, train_all_strategies, BundleEntry, BundleManifest, BUNDLE_MANIFEST};
pub use strategy::{build_phase_masks, LossTerm, Phase, StrategyConfig, StrategyKind, DEFAULT_LAMBDA};
pub use trainer::{train, EpochLoss, TrainConfig, TrainReport, Trainer, TrainingSet};

use thiserror::Error;

use crate::diffcore::DiffError;
use crate::model::ModelError;
use crate::simenv::SimError;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("unknown strategy `{0}` (expected J, JF, S, SF or BASELINE)")]
    UnknownStrategy(String),
    #[error("invalid strategy schedule: {0}")]
    InvalidStrategy(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at phase {phase}, epoch {epoch}, step {step}")]
    NonFinite {
        what: String,
        phase: usize,
        epoch: usize,
        step: usize,
    },
    #[error("checkpoint does not match this run: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io error: {0}")]
    Io(String),
}
