use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::model::PolicyNet;
use crate::simenv::Dataset;

/// Ground-truth phase of a logged frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogPhase {
    Execution,
    Completion,
}

impl LogPhase {
    pub fn from_label(label: u8) -> Self {
        if label == 1 {
            Self::Execution
        } else {
            Self::Completion
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub prompt_id: usize,
    /// Index of the trace (episode) the frame belongs to.
    pub trace: usize,
    pub frame: usize,
    pub phase: LogPhase,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLog {
    pub strategy: String,
    pub seed: u64,
    pub plan: String,
    pub entries: Vec<PredictionEntry>,
}

/// Frames are replayed in batches of this many rows.
const REPLAY_BATCH: usize = 1024;

impl PredictionLog {
    pub fn new(
        strategy: impl Into<String>,
        seed: u64,
        plan: impl Into<String>,
        entries: Vec<PredictionEntry>,
    ) -> Result<Self, AnalysisError> {
        let log = Self {
            strategy: strategy.into(),
            seed,
            plan: plan.into(),
            entries,
        };
        log.validate()?;
        Ok(log)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.entries.is_empty() {
            return Err(AnalysisError::Empty("prediction log"));
        }
        if let Some(e) = self.entries.iter().find(|e| !(0.0..=1.0).contains(&e.p)) {
            return Err(AnalysisError::Invalid(format!(
                "p = {} at trace {} frame {} is not a probability",
                e.p, e.trace, e.frame
            )));
        }
        Ok(())
    }

    /// Runs the policy over every frame of a labelled dataset. Each frame
    /// gets a fresh flow sample; the phase is the frame's label.
    pub fn replay(
        net: &PolicyNet,
        data: &Dataset,
        strategy: impl Into<String>,
        seed: u64,
        integration_steps: usize,
    ) -> Result<Self, AnalysisError> {
        let mut meta = Vec::with_capacity(data.frame_count());
        let mut rows: Vec<&[f64]> = Vec::with_capacity(data.frame_count());
        for (trace, ep) in data.episodes.iter().enumerate() {
            for (frame, f) in ep.frames.iter().enumerate() {
                meta.push((ep.subtask_prompt_id, trace, frame, LogPhase::from_label(f.label)));
                rows.push(&f.obs);
            }
        }
        let dim = net.config.obs_dim;
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(AnalysisError::Invalid(format!(
                "dataset observation has {} values, policy expects {dim}",
                bad.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = Vec::with_capacity(rows.len());
        for block in rows.chunks(REPLAY_BATCH) {
            let ctx = Array2::from_shape_fn((block.len(), dim), |(i, j)| block[i][j]);
            let (_, p) = net.sample_batch(ctx, integration_steps, &mut rng)?;
            ps.extend(p);
        }
        let entries = meta
            .into_iter()
            .zip(ps)
            .map(|((prompt_id, trace, frame, phase), p)| PredictionEntry {
                prompt_id,
                trace,
                frame,
                phase,
                p,
            })
            .collect();
        Self::new(strategy, seed, data.config.plan.clone(), entries)
    }

    pub fn prompts(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.entries.iter().map(|e| e.prompt_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// p values, optionally restricted to one prompt and/or one phase.
    pub fn values(&self, prompt: Option<usize>, phase: Option<LogPhase>) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| prompt.is_none_or(|id| e.prompt_id == id))
            .filter(|e| phase.is_none_or(|ph| e.phase == ph))
            .map(|e| e.p)
            .collect()
    }

    /// Entries grouped per trace, each ordered by frame.
    pub fn traces(&self) -> Vec<Vec<PredictionEntry>> {
        let mut by: BTreeMap<usize, Vec<PredictionEntry>> = BTreeMap::new();
        for e in &self.entries {
            by.entry(e.trace).or_default().push(*e);
        }
        by.into_values()
            .map(|mut t| {
                t.sort_by_key(|e| e.frame);
                t
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    /// First sub-threshold p at or after the first completion frame.
    pub correct: f64,
    /// First sub-threshold p before the subtask was complete.
    pub premature: f64,
    pub never: f64,
}

/// Signal-timing rates per threshold. A trace with no completion frame
/// counts any firing as premature.
pub fn threshold_sweep(log: &PredictionLog, thresholds: &[f64]) -> Vec<SweepPoint> {
    let traces = log.traces();
    let n = traces.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&theta| {
            let (mut correct, mut premature, mut never) = (0usize, 0usize, 0usize);
            for t in &traces {
                let done = t
                    .iter()
                    .position(|e| e.phase == LogPhase::Completion)
                    .unwrap_or(t.len());
                match t.iter().position(|e| e.p < theta) {
                    None => never += 1,
                    Some(i) if i >= done => correct += 1,
                    Some(_) => premature += 1,
                }
            }
            SweepPoint {
                threshold: theta,
                correct: correct as f64 / n,
                premature: premature as f64 / n,
                never: never as f64 / n,
            }
        })
        .collect()
}
