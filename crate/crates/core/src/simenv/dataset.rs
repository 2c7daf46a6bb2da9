use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Action, Goal, Sim, SimConstants, SimError, Target, WorldState};
use crate::hashing::{config_hash, sha256_hex};

/// Hold frames appended after the oracle fires.
pub const DEFAULT_TAIL_FRAMES: usize = 20;
pub const DEFAULT_MAX_EXPERT_STEPS: usize = 200;
pub const MAX_REJECTION_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Full observation context: state vector followed by the prompt one-hot.
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub plan: String,
    pub subtask_prompt_id: usize,
    pub prompt_text: String,
    pub seed: u64,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Subtask,
    LongHorizon,
}

/// Everything that determines a dataset's bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub plan: String,
    pub kind: DatasetKind,
    /// Demonstrations per distinct subtask (subtask datasets) or in total
    /// (long-horizon datasets).
    pub demos: usize,
    pub seed: u64,
    pub noise_scale: f64,
    pub tail_frames: usize,
    pub max_expert_steps: usize,
    pub sim: SimConstants,
}

impl GenConfig {
    pub fn subtask(plan: &str, demos: usize, seed: u64, noise_scale: f64) -> Self {
        Self {
            plan: plan.to_string(),
            kind: DatasetKind::Subtask,
            demos,
            seed,
            noise_scale,
            tail_frames: DEFAULT_TAIL_FRAMES,
            max_expert_steps: DEFAULT_MAX_EXPERT_STEPS,
            sim: SimConstants::default(),
        }
    }

    pub fn long_horizon(plan: &str, demos: usize, seed: u64, noise_scale: f64) -> Self {
        Self {
            kind: DatasetKind::LongHorizon,
            ..Self::subtask(plan, demos, seed, noise_scale)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub plan: String,
    pub kind: DatasetKind,
    pub episodes: usize,
    pub frames: usize,
    pub counts_per_subtask: BTreeMap<String, usize>,
    pub noise_scale: f64,
    pub attempts: usize,
    pub rejections: usize,
    pub config_hash: String,
    /// SHA-256 of the JSON Lines file.
    pub data_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub episodes: Vec<Episode>,
    pub attempts: usize,
    pub rejections: usize,
}

/// Labels frames `1` before the first state where `oracle` holds and `0`
/// from there on.
pub fn label_frames<F: Fn(&WorldState) -> bool>(
    states: &[WorldState],
    oracle: F,
) -> Result<Vec<u8>, SimError> {
    let k = states
        .iter()
        .position(|s| oracle(s))
        .ok_or(SimError::NeverCompleted)?;
    if k == 0 {
        return Err(SimError::DegenerateEpisode);
    }
    Ok((0..states.len()).map(|i| u8::from(i < k)).collect())
}

/// Mixes indices into a per-episode seed (splitmix64 finaliser).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x = x.wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x94D0_49BB_1331_11EB);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

struct Rollout {
    states: Vec<WorldState>,
    actions: Vec<Action>,
}

impl Sim {
    fn noisy(&self, a: &Action, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Action {
        let mut out = *a;
        for i in 0..2 {
            out[3 * i] += noise.sample(rng);
            out[3 * i + 1] += noise.sample(rng);
        }
        out
    }

    /// Runs the expert on `goal` until the oracle fires. Recorded actions are
    /// the clean expert commands; the executed ones carry Gaussian noise.
    fn run_expert(
        &self,
        state: &mut WorldState,
        goal: &Goal,
        max_steps: usize,
        noise: &Normal<f64>,
        rng: &mut ChaCha8Rng,
        out: &mut Rollout,
    ) -> bool {
        for _ in 0..max_steps {
            if self.is_subtask_complete(state, goal) {
                return true;
            }
            let a = self.scripted_expert(state, goal);
            out.states.push(state.clone());
            out.actions.push(a);
            let exec = self.noisy(&a, noise, rng);
            self.step(state, &exec);
        }
        self.is_subtask_complete(state, goal)
    }

    fn record_tail(&self, state: &mut WorldState, goal: &Goal, frames: usize, out: &mut Rollout) {
        for _ in 0..frames {
            let a = self.scripted_expert(state, goal);
            out.states.push(state.clone());
            out.actions.push(a);
            self.step(state, &a);
        }
    }

    /// One subtask-level demonstration starting at plan position `position`.
    pub fn subtask_episode(
        &self,
        position: usize,
        seed: u64,
        cfg: &GenConfig,
    ) -> Result<Episode, SimError> {
        let goal = self.plan.goal(position);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, cfg.noise_scale.max(0.0)).map_err(|e| SimError::Config(e.to_string()))?;
        let mut state = self.reset(seed);
        self.preplace(&mut state, position);
        let mut roll = Rollout {
            states: Vec::new(),
            actions: Vec::new(),
        };
        if !self.run_expert(&mut state, &goal, cfg.max_expert_steps, &noise, &mut rng, &mut roll) {
            return Err(SimError::NeverCompleted);
        }
        self.record_tail(&mut state, &goal, cfg.tail_frames, &mut roll);
        let labels = label_frames(&roll.states, |s| self.is_subtask_complete(s, &goal))?;
        let prompt = goal.subtask.prompt_id;
        Ok(Episode {
            plan: self.plan.name.clone(),
            subtask_prompt_id: prompt,
            prompt_text: goal.subtask.prompt_text.clone(),
            seed,
            frames: self.frames(&roll, prompt, &labels),
        })
    }

    /// One demonstration of the whole plan under the task-level prompt.
    /// Labels are all 1; the monolithic baseline never reads them.
    pub fn long_horizon_episode(&self, seed: u64, cfg: &GenConfig) -> Result<Episode, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, cfg.noise_scale.max(0.0)).map_err(|e| SimError::Config(e.to_string()))?;
        let mut state = self.reset(seed);
        let mut roll = Rollout {
            states: Vec::new(),
            actions: Vec::new(),
        };
        for i in 0..self.plan.len() {
            let goal = self.plan.goal(i);
            if !self.run_expert(&mut state, &goal, cfg.max_expert_steps, &noise, &mut rng, &mut roll) {
                return Err(SimError::NeverCompleted);
            }
        }
        let last = self.plan.goal(self.plan.len() - 1);
        self.record_tail(&mut state, &last, cfg.tail_frames, &mut roll);
        let prompt = self.plan.task_prompt_id();
        let labels = vec![1; roll.states.len()];
        Ok(Episode {
            plan: self.plan.name.clone(),
            subtask_prompt_id: prompt,
            prompt_text: self.plan.task_prompt.clone(),
            seed,
            frames: self.frames(&roll, prompt, &labels),
        })
    }

    fn frames(&self, roll: &Rollout, prompt: usize, labels: &[u8]) -> Vec<Frame> {
        roll.states
            .iter()
            .zip(&roll.actions)
            .zip(labels)
            .map(|((s, a), &label)| Frame {
                obs: self.observe(s, prompt).to_vec(),
                action: a.to_vec(),
                label,
            })
            .collect()
    }

    /// Oracle completion order recovered from placed/closed flag transitions
    /// in an episode's observations, as plan subtask indices.
    pub fn completion_trace(&self, frames: &[Frame]) -> Vec<usize> {
        let mut out = Vec::new();
        for w in frames.windows(2) {
            for (j, &kind) in self.plan.items.iter().enumerate() {
                if !self.placed_flag(&w[0].obs, j) && self.placed_flag(&w[1].obs, j) {
                    if let Some(s) = self.subtask_for_kind(kind) {
                        out.push(s);
                    }
                }
            }
            if !self.container_flag(&w[0].obs) && self.container_flag(&w[1].obs) {
                if let Some(s) = self
                    .plan
                    .subtasks
                    .iter()
                    .position(|s| s.target == Target::CloseContainer)
                {
                    out.push(s);
                }
            }
        }
        out
    }

    pub fn subtask_for_kind(&self, kind: usize) -> Option<usize> {
        self.plan
            .subtasks
            .iter()
            .position(|s| s.target == Target::Item { item_kind: kind })
    }
}

impl Dataset {
    /// Generates a dataset. Failed expert runs are retried with fresh seeds
    /// and counted; more than 5% failures aborts.
    pub fn generate(cfg: &GenConfig) -> Result<Self, SimError> {
        let sim = Sim::new(super::TaskPlan::by_name(&cfg.plan)?, cfg.sim.clone())?;
        if cfg.demos == 0 {
            return Err(SimError::Config("demos must be at least 1".into()));
        }
        let jobs: Vec<(usize, usize)> = match cfg.kind {
            DatasetKind::Subtask => (0..sim.plan.subtasks.len())
                .flat_map(|s| (0..cfg.demos).map(move |d| (s, d)))
                .collect(),
            DatasetKind::LongHorizon => (0..cfg.demos).map(|d| (0, d)).collect(),
        };
        let results: Vec<(Episode, usize)> = jobs
            .par_iter()
            .map(|&(s, d)| {
                let mut failures = 0;
                loop {
                    let seed = derive_seed(cfg.seed, &[s as u64, d as u64, failures as u64]);
                    let ep = match cfg.kind {
                        DatasetKind::Subtask => {
                            let positions = sim.plan.positions_of(s);
                            let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
                            let pos = positions[pick.random_range(0..positions.len())];
                            sim.subtask_episode(pos, seed, cfg)
                        }
                        DatasetKind::LongHorizon => sim.long_horizon_episode(seed, cfg),
                    };
                    match ep {
                        Ok(ep) => return Ok((ep, failures)),
                        Err(SimError::NeverCompleted | SimError::DegenerateEpisode) => {
                            failures += 1;
                            if failures > 20 {
                                return Err(SimError::ExpertFailure {
                                    rejected: failures,
                                    attempted: failures,
                                });
                            }
                        }
                        Err(e) => return Err(e),
                    }
                }
            })
            .collect::<Result<_, _>>()?;
        let rejections: usize = results.iter().map(|r| r.1).sum();
        let attempts = results.len() + rejections;
        if rejections as f64 > MAX_REJECTION_RATE * attempts as f64 {
            return Err(SimError::ExpertFailure {
                rejected: rejections,
                attempted: attempts,
            });
        }
        Ok(Self {
            config: cfg.clone(),
            episodes: results.into_iter().map(|r| r.0).collect(),
            attempts,
            rejections,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.episodes.iter().map(|e| e.frames.len()).sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ep in &self.episodes {
            out.push_str(&serde_json::to_string(ep).expect("episodes serialize"));
            out.push('\n');
        }
        out
    }

    pub fn manifest(&self) -> Manifest {
        let mut counts = BTreeMap::new();
        for ep in &self.episodes {
            *counts.entry(ep.prompt_text.clone()).or_insert(0) += 1;
        }
        Manifest {
            format_version: 1,
            plan: self.config.plan.clone(),
            kind: self.config.kind,
            episodes: self.episodes.len(),
            frames: self.frame_count(),
            counts_per_subtask: counts,
            noise_scale: self.config.noise_scale,
            attempts: self.attempts,
            rejections: self.rejections,
            config_hash: config_hash(&self.config),
            data_hash: sha256_hex(self.to_jsonl().as_bytes()),
        }
    }

    /// Writes `path` (JSON Lines) and the sidecar manifest next to it.
    pub fn write(&self, path: &Path) -> Result<Manifest, SimError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| SimError::Io(e.to_string()))?;
        }
        let mut f = fs::File::create(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| SimError::Io(e.to_string()))?;
        let manifest = self.manifest();
        let mut m = serde_json::to_value(&manifest).expect("manifest serializes");
        m["config"] = serde_json::to_value(&self.config).expect("config serializes");
        fs::write(manifest_path(path), serde_json::to_string_pretty(&m).unwrap())
            .map_err(|e| SimError::Io(e.to_string()))?;
        Ok(manifest)
    }

    /// Reads a dataset and its manifest, checking the data hash.
    pub fn read(path: &Path) -> Result<Self, SimError> {
        let mtext = fs::read_to_string(manifest_path(path))
            .map_err(|e| SimError::Io(format!("{}: {e}", manifest_path(path).display())))?;
        let mval: serde_json::Value =
            serde_json::from_str(&mtext).map_err(|e| SimError::Corrupt(e.to_string()))?;
        let manifest: Manifest =
            serde_json::from_value(mval.clone()).map_err(|e| SimError::Corrupt(e.to_string()))?;
        let config: GenConfig = serde_json::from_value(mval["config"].clone())
            .map_err(|e| SimError::Corrupt(format!("manifest config: {e}")))?;
        let f = fs::File::open(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        let mut episodes = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| SimError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            episodes.push(
                serde_json::from_str(&line)
                    .map_err(|e| SimError::Corrupt(format!("line {}: {e}", n + 1)))?,
            );
        }
        let ds = Self {
            config,
            episodes,
            attempts: manifest.attempts,
            rejections: manifest.rejections,
        };
        let hash = sha256_hex(ds.to_jsonl().as_bytes());
        if hash != manifest.data_hash {
            return Err(SimError::Corrupt("dataset does not match manifest hash".into()));
        }
        Ok(ds)
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
