//! Completion-aware flow-matching policies for sequential manipulation.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: parameter storage, MLP forward/backward, Adam, checkpoints.
//! - [`model`]: the dual-head policy (flow head + completion head) and its losses.
//! - [`simenv`]: a two-arm 2-D packing simulator with scripted experts and datasets.
//! - [`finetune`]: the four dual-head finetuning strategies plus the monolithic baseline.
//! - [`executor`]: threshold-triggered subtask sequencing and open-loop baseline rollouts.
//! - [`analysis`]: success tables, histogram entropy, two-sample KS, threshold sweeps.
//! - [`config`]: the run configuration shared by the command-line tools.

pub mod analysis;
pub mod config;
pub mod diffcore;
pub mod executor;
pub mod finetune;
pub mod hashing;
pub mod model;
pub mod simenv;
