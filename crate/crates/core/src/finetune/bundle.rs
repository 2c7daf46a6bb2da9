use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, StrategyConfig, StrategyKind, TrainConfig, TrainError, TrainReport, TrainingSet};
use crate::simenv::Dataset;

pub const BUNDLE_MANIFEST: &str = "bundle.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub strategy: StrategyKind,
    pub seed: u64,
    /// Paths relative to the bundle directory.
    pub checkpoint: String,
    pub report: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub plan: String,
    pub subtask_data_hash: String,
    pub long_horizon_data_hash: Option<String>,
    /// Sequential strategies train both phases on the subtask dataset.
    pub phase2_data: String,
    pub entries: Vec<BundleEntry>,
}

impl BundleManifest {
    pub fn read(dir: &Path) -> Result<Self, TrainError> {
        let path = dir.join(BUNDLE_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn strategies(&self) -> Vec<StrategyKind> {
        let mut s: Vec<_> = self.entries.iter().map(|e| e.strategy).collect();
        s.sort();
        s.dedup();
        s
    }
}

pub fn entry_stem(strategy: StrategyKind, seed: u64) -> String {
    format!("{}_seed{seed}", strategy.as_str().to_ascii_lowercase())
}

/// Trains every strategy in `strategies` for every seed and writes the
/// checkpoints, reports and a manifest into `out_dir`. The baseline trains on
/// `long_horizon`, which is required when it is requested.
pub fn train_all_strategies(
    subtask: &Dataset,
    long_horizon: Option<&Dataset>,
    strategies: &[StrategyConfig],
    seeds: &[u64],
    hyper: &TrainConfig,
    out_dir: &Path,
) -> Result<BundleManifest, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("at least one seed is required".into()));
    }
    let sub = TrainingSet::from_dataset(subtask, hyper.horizon, true)?;
    let long = if strategies.iter().any(|s| s.strategy.is_baseline()) {
        let ds = long_horizon.ok_or_else(|| {
            TrainError::Config("the baseline needs a long-horizon dataset".into())
        })?;
        Some(TrainingSet::from_dataset(ds, hyper.horizon, false)?)
    } else {
        None
    };
    fs::create_dir_all(out_dir).map_err(|e| TrainError::Io(format!("{}: {e}", out_dir.display())))?;
    let jobs: Vec<(&StrategyConfig, u64)> = strategies
        .iter()
        .flat_map(|s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(strategy, seed)| {
            let data = if strategy.strategy.is_baseline() {
                long.as_ref().unwrap()
            } else {
                &sub
            };
            let (trainer, _) = train(strategy, data, hyper, seed)?;
            let stem = entry_stem(strategy.strategy, seed);
            let ckpt_name = format!("{stem}.ckpt.json");
            let report_name = format!("{stem}.report.json");
            trainer.checkpoint().save(&out_dir.join(&ckpt_name))?;
            let report: TrainReport = trainer.report(data, Some(ckpt_name.clone()))?;
            let path = out_dir.join(&report_name);
            fs::write(&path, serde_json::to_string_pretty(&report).unwrap())
                .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
            Ok(BundleEntry {
                strategy: strategy.strategy,
                seed,
                checkpoint: ckpt_name,
                report: report_name,
                config_hash: report.config_hash,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let manifest = BundleManifest {
        format_version: 1,
        plan: subtask.config.plan.clone(),
        subtask_data_hash: sub.data_hash.clone(),
        long_horizon_data_hash: long.as_ref().map(|l| l.data_hash.clone()),
        phase2_data: "same subtask dataset as phase 1".into(),
        entries,
    };
    let path = out_dir.join(BUNDLE_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    Ok(manifest)
}
