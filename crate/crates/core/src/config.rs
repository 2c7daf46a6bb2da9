//! Run configuration shared by the command-line pipeline. One JSON file per
//! task family carries every constant the pipeline needs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::DEFAULT_BINS;
use crate::executor::RolloutConfig;
use crate::finetune::{StrategyConfig, StrategyKind, TrainConfig, DEFAULT_LAMBDA};
use crate::hashing::config_hash;
use crate::simenv::{
    GenConfig, SimConstants, TaskPlan, DEFAULT_MAX_EXPERT_STEPS, DEFAULT_TAIL_FRAMES,
};

pub const CONFIG_FORMAT_VERSION: u32 = 1;
/// Overrides `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "SEQVLA_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid config field `{field}`: {msg}")]
    Field { field: &'static str, msg: String },
}

fn field(field: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Field { field, msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub demos_per_subtask: usize,
    pub long_horizon_demos: usize,
    /// Held-out demonstrations per subtask replayed for confidence analysis.
    pub heldout_demos: usize,
    pub noise_scale: f64,
    pub seed: u64,
    pub heldout_seed: u64,
    pub tail_frames: usize,
    pub max_expert_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySelection {
    /// Used when no strategy is named on the command line.
    pub default: String,
    pub lambda: f64,
    pub single_phase_epochs: usize,
    pub two_phase_epochs: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed_base: u64,
    pub bins: usize,
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub task: String,
    pub sim: SimConstants,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub strategy: StrategySelection,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
    /// Training seeds.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn for_task(task: &str) -> Result<Self, ConfigError> {
        TaskPlan::by_name(task).map_err(|e| field("task", e.to_string()))?;
        Ok(Self {
            format_version: CONFIG_FORMAT_VERSION,
            task: task.to_string(),
            sim: SimConstants::default(),
            data: DataConfig {
                demos_per_subtask: 50,
                long_horizon_demos: 50,
                heldout_demos: 10,
                noise_scale: 0.005,
                seed: 0,
                heldout_seed: 1_000_003,
                tail_frames: DEFAULT_TAIL_FRAMES,
                max_expert_steps: DEFAULT_MAX_EXPERT_STEPS,
            },
            train: TrainConfig::default(),
            strategy: StrategySelection {
                default: "J".into(),
                lambda: DEFAULT_LAMBDA,
                single_phase_epochs: 30,
                two_phase_epochs: [20, 10],
            },
            rollout: RolloutConfig::default(),
            eval: EvalConfig {
                episodes: 20,
                seed_base: 10_000,
                bins: DEFAULT_BINS,
                thresholds: crate::analysis::default_thresholds(),
            },
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from(format!("runs/{task}")),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let io = |e: std::io::Error| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        fs::write(path, self.to_pretty_json()).map_err(io)
    }

    /// Pretty JSON with sorted keys.
    pub fn to_pretty_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&v).expect("json values serialize") + "\n"
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn plan(&self) -> TaskPlan {
        TaskPlan::by_name(&self.task).expect("validated task")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(field(
                "format_version",
                format!("expected {CONFIG_FORMAT_VERSION}, got {}", self.format_version),
            ));
        }
        TaskPlan::by_name(&self.task).map_err(|e| field("task", e.to_string()))?;
        let s = &self.sim;
        if !(s.max_step > 0.0 && s.pickup_radius > 0.0 && s.drop_radius > 0.0 && s.contact_radius > 0.0) {
            return Err(field("sim", "step size and radii must be positive"));
        }
        if self.data.demos_per_subtask == 0 {
            return Err(field("data.demos_per_subtask", "must be at least 1"));
        }
        if !(self.data.noise_scale >= 0.0 && self.data.noise_scale.is_finite()) {
            return Err(field("data.noise_scale", "must be finite and non-negative"));
        }
        if self.data.max_expert_steps == 0 {
            return Err(field("data.max_expert_steps", "must be positive"));
        }
        self.train.validate().map_err(|e| field("train", e.to_string()))?;
        self.default_strategy()?;
        if !(self.strategy.lambda >= 0.0 && self.strategy.lambda.is_finite()) {
            return Err(field("strategy.lambda", "must be finite and non-negative"));
        }
        if self.strategy.single_phase_epochs == 0 || self.strategy.two_phase_epochs.contains(&0) {
            return Err(field("strategy", "epoch counts must be positive"));
        }
        self.rollout.validate().map_err(|e| field("rollout", e.to_string()))?;
        if self.eval.episodes == 0 {
            return Err(field("eval.episodes", "must be at least 1"));
        }
        if self.eval.bins < 2 {
            return Err(field("eval.bins", "must be at least 2"));
        }
        if self.eval.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(field("eval.thresholds", "thresholds must lie in [0, 1]"));
        }
        if self.seeds.is_empty() {
            return Err(field("seeds", "at least one seed is required"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(field("output_dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn default_strategy(&self) -> Result<StrategyKind, ConfigError> {
        self.strategy
            .default
            .parse()
            .map_err(|e: crate::finetune::TrainError| field("strategy.default", e.to_string()))
    }

    pub fn strategy_config(&self, kind: StrategyKind) -> StrategyConfig {
        let [p1, p2] = self.strategy.two_phase_epochs;
        let mut cfg = StrategyConfig::with_epochs(kind, self.strategy.single_phase_epochs, (p1, p2));
        cfg.lambda = self.strategy.lambda;
        cfg
    }

    pub fn subtask_gen(&self) -> GenConfig {
        self.gen(GenConfig::subtask(&self.task, self.data.demos_per_subtask, self.data.seed, self.data.noise_scale))
    }

    pub fn long_horizon_gen(&self) -> GenConfig {
        self.gen(GenConfig::long_horizon(
            &self.task,
            self.data.long_horizon_demos,
            self.data.seed,
            self.data.noise_scale,
        ))
    }

    pub fn heldout_gen(&self) -> GenConfig {
        self.gen(GenConfig::subtask(
            &self.task,
            self.data.heldout_demos.max(1),
            self.data.heldout_seed,
            self.data.noise_scale,
        ))
    }

    fn gen(&self, mut g: GenConfig) -> GenConfig {
        g.tail_frames = self.data.tail_frames;
        g.max_expert_steps = self.data.max_expert_steps;
        g.sim = self.sim.clone();
        g
    }

    /// `output_dir`, unless the output-root variable is set.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for task in ["salad", "candy"] {
            let cfg = RunConfig::for_task(task).unwrap();
            cfg.validate().unwrap();
            let back: RunConfig = serde_json::from_str(&cfg.to_pretty_json()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        assert!(RunConfig::for_task("soup").is_err());
    }

    #[test]
    fn field_errors_name_the_field() {
        let mut cfg = RunConfig::for_task("salad").unwrap();
        cfg.rollout.theta_stop = 1.5;
        assert!(cfg.validate().unwrap_err().to_string().contains("`rollout`"));
        let mut cfg = RunConfig::for_task("salad").unwrap();
        cfg.strategy.default = "Q".into();
        assert!(cfg.validate().unwrap_err().to_string().contains("strategy.default"));
        let mut v = serde_json::to_value(RunConfig::for_task("salad").unwrap()).unwrap();
        v["extra"] = 1.into();
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn strategy_config_follows_selection() {
        let mut cfg = RunConfig::for_task("candy").unwrap();
        cfg.strategy.two_phase_epochs = [3, 2];
        cfg.strategy.lambda = 0.5;
        let s = cfg.strategy_config(StrategyKind::S);
        assert_eq!(s.total_epochs(), 5);
        assert_eq!(s.lambda, 0.5);
        s.validate().unwrap();
    }
}
