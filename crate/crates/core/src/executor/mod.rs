//! Long-horizon execution: per-subtask rollouts gated by the completion
//! probability, the stop/home/next-prompt transition, and the open-loop
//! baseline runner with post-hoc sequence-error accounting.

mod policies;
mod run;

pub use policies::{ConstantPolicy, LearnedPolicy, OracleStub, Policy, ScriptedPolicy};
pub use run::{
    count_out_of_order, home_arms, run_baseline_open_loop, run_isolated_subtask, run_long_horizon, run_subtask,
    summarize, transition, BatchSummary, SeqPhase, SequencerState,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, PolicyNet};
use crate::simenv::{derive_seed, Sim, SimConstants};

#[derive(Debug, Error, PartialEq)]
pub enum ExecError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error("policy produced a chunk of {got} values, expected {expected}")]
    ChunkShape { expected: usize, got: usize },
    #[error("transition requested in phase {0:?}")]
    NotTransitioning(SeqPhase),
    #[error("records come from different plans or modes")]
    MixedRecords,
    #[error("no records")]
    NoRecords,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// A subtask ends when `p < theta_stop`.
    pub theta_stop: f64,
    pub integration_steps: usize,
    /// Environment steps allowed per subtask.
    pub subtask_budget: usize,
    pub home_budget: usize,
    /// Sub-threshold inferences in a row needed to trigger a transition.
    pub consecutive_signals: usize,
    /// Actions executed per inference; `None` runs the whole chunk.
    pub execute_steps: Option<usize>,
    pub home: [[f64; 2]; 2],
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            theta_stop: 0.2,
            integration_steps: 10,
            subtask_budget: 300,
            home_budget: 100,
            consecutive_signals: 1,
            execute_steps: None,
            home: SimConstants::default().home,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), ExecError> {
        if !(self.theta_stop > 0.0 && self.theta_stop < 1.0) {
            return Err(ExecError::Config("theta_stop must lie in (0, 1)".into()));
        }
        if self.integration_steps == 0 || self.subtask_budget == 0 || self.home_budget == 0 {
            return Err(ExecError::Config(
                "integration_steps, subtask_budget and home_budget must be positive".into(),
            ));
        }
        if self.consecutive_signals == 0 || self.execute_steps == Some(0) {
            return Err(ExecError::Config(
                "consecutive_signals and execute_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Signaled,
    BudgetExhausted,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    Seqvla,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskRecord {
    pub plan_index: usize,
    pub prompt_id: usize,
    pub prompt_text: String,
    pub outcome: Outcome,
    pub steps: usize,
    pub homing_steps: usize,
    pub p_trace: Vec<f64>,
    /// Simulator ground truth for this plan position, read after homing.
    pub oracle_success: bool,
}

/// A completion seen by the simulator: placed item or closed lid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleEvent {
    pub t: u64,
    pub subtask: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub mode: RolloutMode,
    pub plan: String,
    pub seed: u64,
    pub subtasks: Vec<SubtaskRecord>,
    /// Per plan position: completed according to the simulator.
    pub position_success: Vec<bool>,
    pub overall_success: bool,
    /// Sequencer runs: prompt-order violations (0 by construction).
    /// Baseline runs: out-of-order completions plus repeat attempts.
    pub sequence_errors: usize,
    /// Out-of-order completions in the oracle event trace.
    pub oracle_sequence_errors: usize,
    pub repeat_attempts: usize,
    pub events: Vec<OracleEvent>,
    pub total_steps: usize,
    /// Completion probabilities of the open-loop runner (one per inference).
    pub p_trace: Vec<f64>,
    pub config_hash: String,
}

impl ExecutionRecord {
    pub fn attempted_prompts(&self) -> Vec<usize> {
        self.subtasks.iter().map(|s| s.prompt_id).collect()
    }
}

/// One rollout of `net` per world seed, run in parallel. The sampling RNG of
/// each rollout is derived from its world seed.
pub fn rollout_batch(
    net: &PolicyNet,
    sim: &Sim,
    cfg: &RolloutConfig,
    mode: RolloutMode,
    seeds: &[u64],
    config_hash: &str,
) -> Result<Vec<ExecutionRecord>, ExecError> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut policy = LearnedPolicy::new(net, cfg.integration_steps, derive_seed(seed, &[0x9011]));
            let mut rec = match mode {
                RolloutMode::Seqvla => run_long_horizon(sim, &mut policy, cfg, seed)?,
                RolloutMode::Baseline => run_baseline_open_loop(sim, &mut policy, cfg, seed)?,
            };
            rec.config_hash = config_hash.to_string();
            Ok(rec)
        })
        .collect()
}
