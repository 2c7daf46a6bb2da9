use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{StrategyConfig, StrategyKind, TrainError};
use crate::diffcore::{Activation, Adam, AdamConfig, Checkpoint, RngState, StepStatus};
use crate::hashing::config_hash;
use crate::model::{ActionNormalizer, FlowBatch, LossBreakdown, PolicyConfig, PolicyNet};
use crate::simenv::{derive_seed, Dataset, ACTION_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub horizon: usize,
    pub context_dim: usize,
    pub feature_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub expert_hidden: Vec<usize>,
    pub flow_hidden: Vec<usize>,
    pub hidden_activation: Activation,
    /// Frames in the fixed evaluation batch behind the initial/final losses.
    pub eval_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            horizon: 8,
            context_dim: 64,
            feature_dim: 64,
            encoder_hidden: vec![64, 64],
            expert_hidden: vec![64, 64],
            flow_hidden: vec![],
            hidden_activation: Activation::Tanh,
            eval_frames: 1024,
        }
    }
}

impl TrainConfig {
    pub fn policy_config(&self, obs_dim: usize) -> PolicyConfig {
        PolicyConfig {
            obs_dim,
            horizon: self.horizon,
            action_dim: ACTION_DIM,
            context_dim: self.context_dim,
            feature_dim: self.feature_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            expert_hidden: self.expert_hidden.clone(),
            flow_hidden: self.flow_hidden.clone(),
            hidden_activation: self.hidden_activation,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.horizon == 0 || self.eval_frames == 0 {
            return Err(TrainError::Config(
                "batch_size, horizon and eval_frames must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Frames flattened into training matrices. Row `t` pairs the observation at
/// `t` with the normalized actions `t..t+H` of the same episode, the last
/// action repeated past the episode end.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub contexts: Array2<f64>,
    pub chunks: Array2<f64>,
    /// `None` for the baseline, which never sees completion labels.
    pub labels: Option<Vec<f64>>,
    pub normalizer: ActionNormalizer,
    pub plan: String,
    pub data_hash: String,
    pub horizon: usize,
}

impl TrainingSet {
    pub fn from_dataset(ds: &Dataset, horizon: usize, with_labels: bool) -> Result<Self, TrainError> {
        let n = ds.frame_count();
        if n == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let obs_dim = ds.episodes[0].frames[0].obs.len();
        let normalizer = ActionNormalizer::for_sim(&ds.config.sim);
        let chunk_len = horizon * ACTION_DIM;
        let mut contexts = Array2::<f64>::zeros((n, obs_dim));
        let mut chunks = Array2::<f64>::zeros((n, chunk_len));
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for ep in &ds.episodes {
            for t in 0..ep.frames.len() {
                let f = &ep.frames[t];
                if f.obs.len() != obs_dim || f.action.len() != ACTION_DIM {
                    return Err(TrainError::Config(format!(
                        "episode {} frame {t} has inconsistent dimensions",
                        ep.seed
                    )));
                }
                contexts.row_mut(row).iter_mut().zip(&f.obs).for_each(|(d, s)| *d = *s);
                let mut chunk = Vec::with_capacity(chunk_len);
                for k in 0..horizon {
                    let src = &ep.frames[(t + k).min(ep.frames.len() - 1)].action;
                    chunk.extend_from_slice(src);
                }
                normalizer.normalize(&mut chunk);
                chunks.row_mut(row).iter_mut().zip(&chunk).for_each(|(d, s)| *d = *s);
                if with_labels {
                    labels.push(f64::from(f.label));
                }
                row += 1;
            }
        }
        Ok(Self {
            contexts,
            chunks,
            labels: with_labels.then_some(labels),
            normalizer,
            plan: ds.config.plan.clone(),
            data_hash: ds.manifest().data_hash,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.contexts.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.contexts.ncols()
    }

    fn batch(&self, rows: &[usize], rng: &mut ChaCha8Rng) -> Result<FlowBatch, TrainError> {
        let labels = match &self.labels {
            Some(l) => rows.iter().map(|&r| l[r]).collect(),
            None => vec![0.0; rows.len()],
        };
        Ok(FlowBatch::sample(
            self.contexts.select(Axis(0), rows),
            self.chunks.select(Axis(0), rows),
            labels,
            rng,
        )?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub phase: usize,
    pub epoch: usize,
    pub action: f64,
    pub completion: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub plan: String,
    pub config_hash: String,
    pub data_hash: String,
    pub epochs: Vec<EpochLoss>,
    pub action_curve: Vec<f64>,
    pub completion_curve: Vec<f64>,
    pub total_curve: Vec<f64>,
    /// Losses on the fixed evaluation batch before and after training,
    /// weighted with the first phase's loss weights.
    pub initial_loss: LossBreakdown,
    pub final_loss: LossBreakdown,
    pub checkpoint: Option<String>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn curves_finite(&self) -> bool {
        self.action_curve
            .iter()
            .chain(&self.completion_curve)
            .chain(&self.total_curve)
            .all(|v| v.is_finite())
    }
}

/// One training run; resumable at epoch granularity through [`Trainer::checkpoint`].
#[derive(Debug, Clone)]
pub struct Trainer {
    pub strategy: StrategyConfig,
    pub hyper: TrainConfig,
    pub seed: u64,
    pub net: PolicyNet,
    optimizer: Adam,
    rng: ChaCha8Rng,
    phase: usize,
    epoch: usize,
    epochs: Vec<EpochLoss>,
    plan: String,
    data_hash: String,
    initial_loss: LossBreakdown,
    wall_clock_secs: f64,
}

impl Trainer {
    pub fn new(
        strategy: StrategyConfig,
        hyper: TrainConfig,
        data: &TrainingSet,
        seed: u64,
    ) -> Result<Self, TrainError> {
        strategy.validate()?;
        hyper.validate()?;
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if data.horizon != hyper.horizon {
            return Err(TrainError::Config("training set horizon differs from config".into()));
        }
        if data.labels.is_none() != strategy.strategy.is_baseline() {
            return Err(TrainError::Config(
                "completion labels must be provided for SeqVLA strategies and withheld for the baseline"
                    .into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = PolicyNet::new(hyper.policy_config(data.obs_dim()), data.normalizer.clone(), &mut rng)?;
        let optimizer = Adam::new(&net.params, Self::adam_config(&hyper));
        let mut t = Self {
            strategy,
            hyper,
            seed,
            net,
            optimizer,
            rng,
            phase: 0,
            epoch: 0,
            epochs: Vec::new(),
            plan: data.plan.clone(),
            data_hash: data.data_hash.clone(),
            initial_loss: LossBreakdown {
                action: 0.0,
                completion: 0.0,
                total: 0.0,
            },
            wall_clock_secs: 0.0,
        };
        t.enter_phase()?;
        t.initial_loss = t.eval_loss(data)?;
        Ok(t)
    }

    fn adam_config(hyper: &TrainConfig) -> AdamConfig {
        AdamConfig {
            lr: hyper.learning_rate,
            ..AdamConfig::default()
        }
    }

    /// Applies the current phase's freeze mask and starts a fresh optimizer.
    fn enter_phase(&mut self) -> Result<(), TrainError> {
        if let Some(p) = self.strategy.phases.get(self.phase) {
            self.net.params.set_freeze_mask(&p.freeze)?;
            self.optimizer = Adam::new(&self.net.params, Self::adam_config(&self.hyper));
        }
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.phase >= self.strategy.phases.len()
    }

    /// `(phase, epoch within phase)` of the next epoch to run.
    pub fn progress(&self) -> (usize, usize) {
        (self.phase, self.epoch)
    }

    pub fn epochs(&self) -> &[EpochLoss] {
        &self.epochs
    }

    pub fn config_hash(&self) -> String {
        config_hash(&json!({
            "strategy": self.strategy,
            "hyper": self.hyper,
            "seed": self.seed,
            "data_hash": self.data_hash,
        }))
    }

    fn eval_batch(&self, data: &TrainingSet) -> Result<FlowBatch, TrainError> {
        let n = data.len();
        let m = self.hyper.eval_frames.min(n);
        let rows: Vec<usize> = (0..m).map(|i| i * n / m).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0xE7A1]));
        data.batch(&rows, &mut rng)
    }

    fn eval_loss(&self, data: &TrainingSet) -> Result<LossBreakdown, TrainError> {
        let w = self.strategy.phases[0].weights(self.strategy.lambda);
        let l = self.net.losses(&self.eval_batch(data)?)?;
        Ok(LossBreakdown {
            action: l.action,
            completion: if data.labels.is_some() { l.completion } else { 0.0 },
            total: w.action * l.action + w.completion * l.completion,
        })
    }

    /// Runs one epoch of the current phase.
    pub fn run_epoch(&mut self, data: &TrainingSet) -> Result<EpochLoss, TrainError> {
        if self.is_done() {
            return Err(TrainError::Config("training already finished".into()));
        }
        let start = Instant::now();
        let phase = &self.strategy.phases[self.phase];
        let weights = phase.weights(self.strategy.lambda);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut sa, mut sc, mut st) = (0.0, 0.0, 0.0);
        for (step, rows) in order.chunks(self.hyper.batch_size).enumerate() {
            let batch = data.batch(rows, &mut self.rng)?;
            let l = self.net.loss_and_grad(&batch, weights)?;
            let fail = |what: &str| TrainError::NonFinite {
                what: what.to_string(),
                phase: self.phase,
                epoch: self.epoch,
                step,
            };
            if !l.total.is_finite() {
                return Err(fail("loss"));
            }
            if let StepStatus::Rejected { param } = self.optimizer.step(&mut self.net.params) {
                return Err(fail(&format!("gradient in {param}")));
            }
            let w = rows.len() as f64;
            sa += w * l.action;
            sc += w * if data.labels.is_some() { l.completion } else { 0.0 };
            st += w * l.total;
        }
        let n = data.len() as f64;
        let rec = EpochLoss {
            phase: self.phase,
            epoch: self.epoch,
            action: sa / n,
            completion: sc / n,
            total: st / n,
        };
        self.epochs.push(rec);
        self.epoch += 1;
        if self.epoch >= self.strategy.phases[self.phase].epochs {
            self.phase += 1;
            self.epoch = 0;
            self.enter_phase()?;
        }
        self.wall_clock_secs += start.elapsed().as_secs_f64();
        Ok(rec)
    }

    /// Runs all remaining epochs; `after_epoch` sees the trainer after each.
    pub fn run<F>(&mut self, data: &TrainingSet, mut after_epoch: F) -> Result<(), TrainError>
    where
        F: FnMut(&Trainer) -> Result<(), TrainError>,
    {
        while !self.is_done() {
            self.run_epoch(data)?;
            after_epoch(self)?;
        }
        Ok(())
    }

    /// Max |gradient| per parameter tensor for one batch under the current
    /// phase's mask and losses. Uses its own RNG, so training is unaffected.
    pub fn gradient_probe(&mut self, data: &TrainingSet) -> Result<BTreeMap<String, f64>, TrainError> {
        let phase = self.strategy.phases.get(self.phase).ok_or_else(|| {
            TrainError::Config("training already finished".into())
        })?;
        let weights = phase.weights(self.strategy.lambda);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0x6AD]));
        let rows: Vec<usize> = (0..self.hyper.batch_size.min(data.len())).collect();
        let batch = data.batch(&rows, &mut rng)?;
        self.net.params.zero_grad();
        self.net.loss_and_grad(&batch, weights)?;
        let out = self
            .net
            .params
            .ids()
            .map(|id| {
                let g = self.net.params.grad(id).iter().fold(0.0f64, |m, g| m.max(g.abs()));
                (self.net.params.name(id).to_string(), g)
            })
            .collect();
        self.net.params.zero_grad();
        Ok(out)
    }

    pub fn mode(&self) -> &'static str {
        if self.strategy.strategy.is_baseline() {
            "baseline"
        } else {
            "seqvla"
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = json!({
            "mode": self.mode(),
            "plan": self.plan,
            "strategy": self.strategy,
            "hyper": self.hyper,
            "seed": self.seed,
            "data_hash": self.data_hash,
            "config_hash": self.config_hash(),
            "phase": self.phase,
            "epoch": self.epoch,
            "complete": self.is_done(),
            "epochs": self.epochs,
            "initial_loss": self.initial_loss,
        });
        let rng_state = RngState {
            seed: self.seed,
            draws: self.rng.get_word_pos() as u64,
        };
        self.net.checkpoint(Some(&self.optimizer), rng_state, meta)
    }

    /// Continues a run from a checkpoint written by [`Self::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, data: &TrainingSet) -> Result<Self, TrainError> {
        let m = &ckpt.metadata;
        let parse = |k: &str| {
            m.get(k)
                .filter(|v| !v.is_null())
                .cloned()
                .ok_or_else(|| TrainError::Mismatch(format!("metadata.{k} missing")))
        };
        let strategy: StrategyConfig = serde_json::from_value(parse("strategy")?)
            .map_err(|e| TrainError::Mismatch(format!("metadata.strategy: {e}")))?;
        let hyper: TrainConfig = serde_json::from_value(parse("hyper")?)
            .map_err(|e| TrainError::Mismatch(format!("metadata.hyper: {e}")))?;
        let data_hash = parse("data_hash")?.as_str().unwrap_or_default().to_string();
        if data_hash != data.data_hash {
            return Err(TrainError::Mismatch(format!(
                "data_hash: checkpoint {data_hash}, dataset {}",
                data.data_hash
            )));
        }
        let epochs: Vec<EpochLoss> = serde_json::from_value(parse("epochs")?)
            .map_err(|e| TrainError::Mismatch(format!("metadata.epochs: {e}")))?;
        let initial_loss: LossBreakdown = serde_json::from_value(parse("initial_loss")?)
            .map_err(|e| TrainError::Mismatch(format!("metadata.initial_loss: {e}")))?;
        let as_usize = |k: &str| -> Result<usize, TrainError> {
            parse(k)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| TrainError::Mismatch(format!("metadata.{k} is not an integer")))
        };
        let net = PolicyNet::from_checkpoint(ckpt)?;
        if net.config != hyper.policy_config(data.obs_dim()) {
            return Err(TrainError::Mismatch("policy dimensions differ from the dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(ckpt.rng_state.seed);
        rng.set_word_pos(u128::from(ckpt.rng_state.draws));
        let mut t = Self {
            strategy,
            hyper,
            seed: ckpt.rng_state.seed,
            net,
            optimizer: Adam::new(&crate::diffcore::ParamSet::new(), AdamConfig::default()),
            rng,
            phase: as_usize("phase")?,
            epoch: as_usize("epoch")?,
            epochs,
            plan: data.plan.clone(),
            data_hash,
            initial_loss,
            wall_clock_secs: 0.0,
        };
        t.enter_phase()?;
        if let Some(opt) = ckpt.restore_optimizer(&t.net.params)? {
            t.optimizer = opt;
        }
        Ok(t)
    }

    pub fn report(&self, data: &TrainingSet, checkpoint: Option<String>) -> Result<TrainReport, TrainError> {
        Ok(TrainReport {
            strategy: self.strategy.strategy,
            seed: self.seed,
            plan: self.plan.clone(),
            config_hash: self.config_hash(),
            data_hash: self.data_hash.clone(),
            epochs: self.epochs.clone(),
            action_curve: self.epochs.iter().map(|e| e.action).collect(),
            completion_curve: self.epochs.iter().map(|e| e.completion).collect(),
            total_curve: self.epochs.iter().map(|e| e.total).collect(),
            initial_loss: self.initial_loss,
            final_loss: self.eval_loss(data)?,
            checkpoint,
            wall_clock_secs: self.wall_clock_secs,
        })
    }
}

/// Trains `strategy` from scratch on `data` with `seed`.
pub fn train(
    strategy: &StrategyConfig,
    data: &TrainingSet,
    hyper: &TrainConfig,
    seed: u64,
) -> Result<(Trainer, TrainReport), TrainError> {
    let mut t = Trainer::new(strategy.clone(), hyper.clone(), data, seed)?;
    t.run(data, |_| Ok(()))?;
    let report = t.report(data, None)?;
    Ok((t, report))
}
