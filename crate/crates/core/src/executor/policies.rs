use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ExecError;
use crate::model::{ActionChunk, ObservationContext, PolicyNet};
use crate::simenv::{Sim, ACTION_DIM};

/// Anything that maps an observation context to an action chunk (simulator
/// units) and a continuation probability `p`.
pub trait Policy {
    fn horizon(&self) -> usize;
    fn infer(&mut self, ctx: &ObservationContext) -> Result<(ActionChunk, f64), ExecError>;
}

/// A trained network sampled with a seeded RNG.
pub struct LearnedPolicy<'a> {
    net: &'a PolicyNet,
    steps: usize,
    rng: ChaCha8Rng,
}

impl<'a> LearnedPolicy<'a> {
    pub fn new(net: &'a PolicyNet, steps: usize, seed: u64) -> Self {
        Self {
            net,
            steps,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for LearnedPolicy<'_> {
    fn horizon(&self) -> usize {
        self.net.config.horizon
    }

    fn infer(&mut self, ctx: &ObservationContext) -> Result<(ActionChunk, f64), ExecError> {
        Ok(self.net.sample_action_chunk(ctx, self.steps, &mut self.rng)?)
    }
}

fn hold_chunk(horizon: usize) -> ActionChunk {
    ActionChunk {
        data: vec![0.0; horizon * ACTION_DIM],
        horizon,
        action_dim: ACTION_DIM,
    }
}

/// Zero motion with open grippers and a fixed `p`.
pub struct ConstantPolicy {
    pub p: f64,
    pub horizon: usize,
}

impl Policy for ConstantPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn infer(&mut self, _: &ObservationContext) -> Result<(ActionChunk, f64), ExecError> {
        Ok((hold_chunk(self.horizon), self.p))
    }
}

/// Zero motion; emits `ps` in order, then `then` forever.
pub struct ScriptedPolicy {
    pub ps: Vec<f64>,
    pub then: f64,
    pub horizon: usize,
    calls: usize,
}

impl ScriptedPolicy {
    pub fn new(ps: Vec<f64>, then: f64, horizon: usize) -> Self {
        Self {
            ps,
            then,
            horizon,
            calls: 0,
        }
    }

    pub fn calls(&self) -> usize {
        self.calls
    }
}

impl Policy for ScriptedPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn infer(&mut self, _: &ObservationContext) -> Result<(ActionChunk, f64), ExecError> {
        let p = self.ps.get(self.calls).copied().unwrap_or(self.then);
        self.calls += 1;
        Ok((hold_chunk(self.horizon), p))
    }
}

/// Scripted-expert stand-in that reconstructs the world from the observed
/// state vector. It walks `order` (plan positions), emitting `p = 1` while the
/// current position is unfinished and `p = 0` once it is, then moves on. Under
/// the task-level prompt it advances silently, the way an open-loop policy would.
pub struct OracleStub {
    sim: Sim,
    order: Vec<usize>,
    cursor: usize,
    horizon: usize,
}

impl OracleStub {
    pub fn new(sim: Sim, horizon: usize) -> Self {
        let order = (0..sim.plan.len()).collect();
        Self::with_order(sim, order, horizon)
    }

    pub fn with_order(sim: Sim, order: Vec<usize>, horizon: usize) -> Self {
        Self {
            sim,
            order,
            cursor: 0,
            horizon,
        }
    }
}

impl Policy for OracleStub {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn infer(&mut self, ctx: &ObservationContext) -> Result<(ActionChunk, f64), ExecError> {
        let open_loop = ctx.prompt() == self.sim.plan.task_prompt_id();
        let mut world = self.sim.decode_state(ctx.state());
        loop {
            let Some(&pos) = self.order.get(self.cursor) else {
                return Ok((hold_chunk(self.horizon), 0.0));
            };
            let goal = self.sim.plan.goal(pos);
            if !self.sim.is_subtask_complete(&world, &goal) {
                let mut data = Vec::with_capacity(self.horizon * ACTION_DIM);
                for _ in 0..self.horizon {
                    let a = self.sim.scripted_expert(&world, &goal);
                    data.extend_from_slice(&a);
                    self.sim.step(&mut world, &a);
                }
                return Ok((ActionChunk::new(data, self.horizon, ACTION_DIM)?, 1.0));
            }
            self.cursor += 1;
            if !open_loop {
                return Ok((hold_chunk(self.horizon), 0.0));
            }
        }
    }
}
