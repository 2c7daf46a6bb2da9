use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Goal, SimError, Target, TaskPlan};
use crate::model::ObservationContext;

/// Per-arm (vx, vy, grip) for left then right.
pub const ACTION_DIM: usize = 6;
pub type Action = [f64; ACTION_DIM];

/// Workspace geometry, contact radii and expert gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConstants {
    pub max_step: f64,
    pub pickup_radius: f64,
    pub drop_radius: f64,
    pub contact_radius: f64,
    pub min_separation: f64,
    pub container: [f64; 2],
    pub home: [[f64; 2]; 2],
    pub item_region_x: [f64; 2],
    pub item_region_y: [f64; 2],
    pub expert_gain: f64,
    /// Expert closes its gripper once this close to the item.
    pub grasp_tolerance: f64,
    /// Expert opens its gripper once this close to the container.
    pub release_tolerance: f64,
    /// Distance of the post-release retreat point from the container.
    pub retreat_distance: f64,
    /// Horizontal offset of each gripper from the container when closing it.
    pub close_offset: f64,
}

impl Default for SimConstants {
    fn default() -> Self {
        Self {
            max_step: 0.05,
            pickup_radius: 0.05,
            drop_radius: 0.07,
            contact_radius: 0.07,
            min_separation: 0.08,
            container: [0.5, 0.85],
            home: [[0.15, 0.7], [0.85, 0.7]],
            item_region_x: [0.08, 0.92],
            item_region_y: [0.08, 0.5],
            expert_gain: 0.5,
            grasp_tolerance: 0.015,
            release_tolerance: 0.02,
            retreat_distance: 0.15,
            close_offset: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmState {
    pub pos: [f64; 2],
    pub closed: bool,
    pub held: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemState {
    pub kind: usize,
    pub pos: [f64; 2],
    /// Position at reset; used to detect repeat attempts on placed items.
    pub origin: [f64; 2],
    pub placed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub arms: [ArmState; 2],
    pub items: Vec<ItemState>,
    pub container_closed: bool,
    pub t: u64,
}

impl WorldState {
    pub fn placed_count(&self, kind: usize) -> usize {
        self.items.iter().filter(|i| i.kind == kind && i.placed).count()
    }

    pub fn all_placed(&self) -> bool {
        self.items.iter().all(|i| i.placed)
    }

    pub fn holder_of(&self, item: usize) -> Option<usize> {
        self.arms.iter().position(|a| a.held == Some(item))
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Something that happened during one [`Sim::step`].
#[derive(Debug, Clone, PartialEq)]
pub enum StepEvent {
    Grasped { arm: usize, item: usize },
    Placed { arm: usize, item: usize },
    Dropped { arm: usize, item: usize },
    ContainerClosed,
    /// An empty gripper closed on the reset position of an already placed item.
    RepeatAttempt { arm: usize, item: usize },
}

/// Deterministic 2-D two-arm packing simulator for one task family.
#[derive(Debug, Clone)]
pub struct Sim {
    pub plan: TaskPlan,
    pub consts: SimConstants,
}

/// Length of the state part of an observation for `n_items` items.
pub fn state_dim(n_items: usize) -> usize {
    6 + 3 * n_items + 1
}

impl Sim {
    pub fn new(plan: TaskPlan, consts: SimConstants) -> Result<Self, SimError> {
        plan.validate()?;
        Ok(Self { plan, consts })
    }

    pub fn state_dim(&self) -> usize {
        state_dim(self.plan.items.len())
    }

    pub fn obs_dim(&self) -> usize {
        self.state_dim() + self.plan.n_prompts()
    }

    /// Items at seeded, pairwise separated positions; grippers home and open;
    /// container open.
    pub fn reset(&self, seed: u64) -> WorldState {
        let c = &self.consts;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.plan.items.len();
        let positions = loop {
            let mut pts: Vec<[f64; 2]> = Vec::with_capacity(n);
            let mut tries = 0;
            while pts.len() < n && tries < 10_000 {
                tries += 1;
                let p = [
                    rng.random_range(c.item_region_x[0]..c.item_region_x[1]),
                    rng.random_range(c.item_region_y[0]..c.item_region_y[1]),
                ];
                if pts.iter().all(|q| dist(p, *q) >= c.min_separation) {
                    pts.push(p);
                }
            }
            if pts.len() == n {
                break pts;
            }
        };
        WorldState {
            arms: [0, 1].map(|i| ArmState {
                pos: c.home[i],
                closed: false,
                held: None,
            }),
            items: self
                .plan
                .items
                .iter()
                .zip(positions)
                .map(|(&kind, pos)| ItemState {
                    kind,
                    pos,
                    origin: pos,
                    placed: false,
                })
                .collect(),
            container_closed: false,
            t: 0,
        }
    }

    /// Teleports the outcome of plan steps `0..position` into `state`, as if
    /// they had been executed and the arms returned home.
    pub fn preplace(&self, state: &mut WorldState, position: usize) {
        for i in 0..position {
            match self.plan.step(i).target {
                Target::Item { item_kind } => {
                    if let Some(item) = state.items.iter_mut().find(|it| it.kind == item_kind && !it.placed) {
                        item.placed = true;
                        item.pos = self.consts.container;
                    }
                }
                Target::CloseContainer => state.container_closed = true,
            }
        }
    }

    /// Advances the world by one control step. Invalid attempts are no-ops.
    pub fn step(&self, s: &mut WorldState, action: &Action) -> Vec<StepEvent> {
        let c = &self.consts;
        let mut events = Vec::new();
        for (i, arm) in s.arms.iter_mut().enumerate() {
            for axis in 0..2 {
                let v = action[3 * i + axis];
                let v = if v.is_finite() { v.clamp(-c.max_step, c.max_step) } else { 0.0 };
                arm.pos[axis] = (arm.pos[axis] + v).clamp(0.0, 1.0);
            }
            if let Some(h) = arm.held {
                s.items[h].pos = arm.pos;
            }
        }
        let mut closing = [false; 2];
        for i in 0..2 {
            let cmd_closed = action[3 * i + 2] > 0.5;
            closing[i] = cmd_closed;
            let was_closed = s.arms[i].closed;
            let pos = s.arms[i].pos;
            if cmd_closed {
                if s.arms[i].held.is_none() {
                    let other_held = s.arms[1 - i].held;
                    let candidate = s
                        .items
                        .iter()
                        .enumerate()
                        .filter(|(j, it)| !it.placed && Some(*j) != other_held)
                        .map(|(j, it)| (j, dist(pos, it.pos)))
                        .filter(|&(_, d)| d <= c.pickup_radius)
                        .min_by(|a, b| a.1.total_cmp(&b.1));
                    if let Some((j, _)) = candidate {
                        s.arms[i].held = Some(j);
                        s.items[j].pos = pos;
                        events.push(StepEvent::Grasped { arm: i, item: j });
                    } else if !was_closed {
                        if let Some(j) = s
                            .items
                            .iter()
                            .position(|it| it.placed && dist(pos, it.origin) <= c.pickup_radius)
                        {
                            events.push(StepEvent::RepeatAttempt { arm: i, item: j });
                        }
                    }
                }
            } else if let Some(h) = s.arms[i].held.take() {
                if !s.container_closed && dist(pos, c.container) <= c.drop_radius {
                    s.items[h].placed = true;
                    s.items[h].pos = c.container;
                    events.push(StepEvent::Placed { arm: i, item: h });
                } else {
                    events.push(StepEvent::Dropped { arm: i, item: h });
                }
            }
            s.arms[i].closed = cmd_closed;
        }
        if !s.container_closed
            && closing[0]
            && closing[1]
            && s.arms.iter().all(|a| a.held.is_none() && dist(a.pos, c.container) <= c.contact_radius)
            && s.all_placed()
        {
            s.container_closed = true;
            events.push(StepEvent::ContainerClosed);
        }
        s.t += 1;
        events
    }

    /// The oracle: target placed, assigned gripper released and clear of the
    /// container; or, for the closing subtask, the lid closed.
    pub fn is_subtask_complete(&self, s: &WorldState, goal: &Goal) -> bool {
        match goal.subtask.target {
            Target::CloseContainer => s.container_closed,
            Target::Item { item_kind } => {
                let arm = &s.arms[goal.subtask.arm.index().expect("item subtasks are one-armed")];
                s.placed_count(item_kind) >= goal.required
                    && !arm.closed
                    && arm.held.is_none()
                    && dist(arm.pos, self.consts.container) > self.consts.contact_radius
            }
        }
    }

    /// Ground-truth outcome of a plan position, ignoring gripper state.
    pub fn goal_achieved(&self, s: &WorldState, goal: &Goal) -> bool {
        match goal.subtask.target {
            Target::CloseContainer => s.container_closed,
            Target::Item { item_kind } => s.placed_count(item_kind) >= goal.required,
        }
    }

    fn toward(&self, from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
        let c = &self.consts;
        [0, 1].map(|k| (c.expert_gain * (to[k] - from[k])).clamp(-c.max_step, c.max_step))
    }

    pub fn retreat_point(&self, arm: usize) -> [f64; 2] {
        let c = &self.consts;
        let d = [c.home[arm][0] - c.container[0], c.home[arm][1] - c.container[1]];
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
        [
            c.container[0] + c.retreat_distance * d[0] / n,
            c.container[1] + c.retreat_distance * d[1] / n,
        ]
    }

    /// Index of the item the expert would fetch next for `kind`.
    pub fn next_item(&self, s: &WorldState, kind: usize, arm: usize) -> Option<usize> {
        let other = s.arms[1 - arm].held;
        s.items
            .iter()
            .enumerate()
            .find(|(j, it)| it.kind == kind && !it.placed && Some(*j) != other)
            .map(|(j, _)| j)
    }

    /// Proportional scripted controller. Once the goal holds it returns a
    /// zero-velocity hold that keeps the current grip.
    pub fn scripted_expert(&self, s: &WorldState, goal: &Goal) -> Action {
        let c = &self.consts;
        let mut a = [0.0; ACTION_DIM];
        if self.is_subtask_complete(s, goal) {
            for i in 0..2 {
                a[3 * i + 2] = if s.arms[i].closed { 1.0 } else { 0.0 };
            }
            return a;
        }
        let mut set = |i: usize, v: [f64; 2], grip: bool| {
            a[3 * i] = v[0];
            a[3 * i + 1] = v[1];
            a[3 * i + 2] = if grip { 1.0 } else { 0.0 };
        };
        match goal.subtask.target {
            Target::Item { item_kind } => {
                let i = goal.subtask.arm.index().expect("item subtasks are one-armed");
                let arm = &s.arms[i];
                if arm.held.is_some() {
                    let d = dist(arm.pos, c.container);
                    set(i, self.toward(arm.pos, c.container), d > c.release_tolerance);
                } else if s.placed_count(item_kind) >= goal.required {
                    set(i, self.toward(arm.pos, self.retreat_point(i)), false);
                } else if let Some(j) = self.next_item(s, item_kind, i) {
                    let target = s.items[j].pos;
                    set(
                        i,
                        self.toward(arm.pos, target),
                        dist(arm.pos, target) <= c.grasp_tolerance,
                    );
                }
            }
            Target::CloseContainer => {
                let targets = [
                    [c.container[0] - c.close_offset, c.container[1]],
                    [c.container[0] + c.close_offset, c.container[1]],
                ];
                let ready = (0..2).all(|i| dist(s.arms[i].pos, targets[i]) <= c.grasp_tolerance);
                for (i, t) in targets.iter().enumerate() {
                    set(i, self.toward(s.arms[i].pos, *t), ready);
                }
            }
        }
        a
    }

    /// Flat state vector: per arm (x, y, closed), per item (x, y, placed),
    /// container closed.
    pub fn state_vector(&self, s: &WorldState) -> Vec<f64> {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        let mut v = Vec::with_capacity(self.state_dim());
        for arm in &s.arms {
            v.extend_from_slice(&[arm.pos[0], arm.pos[1], flag(arm.closed)]);
        }
        for it in &s.items {
            v.extend_from_slice(&[it.pos[0], it.pos[1], flag(it.placed)]);
        }
        v.push(flag(s.container_closed));
        v
    }

    pub fn observe(&self, s: &WorldState, prompt_id: usize) -> ObservationContext {
        ObservationContext::new(self.state_vector(s), prompt_id, self.plan.n_prompts())
            .expect("simulator observations are well formed")
    }

    /// Indices of the binary entries of the state vector.
    pub fn flag_indices(&self) -> Vec<usize> {
        let n = self.plan.items.len();
        let mut v = vec![2, 5];
        v.extend((0..n).map(|j| 6 + 3 * j + 2));
        v.push(6 + 3 * n);
        v
    }

    /// Placed flag of item `j` read back from a state (or observation) vector.
    pub fn placed_flag(&self, state: &[f64], j: usize) -> bool {
        state[6 + 3 * j + 2] > 0.5
    }

    pub fn container_flag(&self, state: &[f64]) -> bool {
        state[6 + 3 * self.plan.items.len()] > 0.5
    }

    /// Rebuilds a world from a state vector. Held items are recovered from
    /// coincidence with a closed gripper; origins are unknown and set to the
    /// current positions.
    pub fn decode_state(&self, v: &[f64]) -> WorldState {
        let n = self.plan.items.len();
        let items: Vec<ItemState> = (0..n)
            .map(|j| {
                let pos = [v[6 + 3 * j], v[6 + 3 * j + 1]];
                ItemState {
                    kind: self.plan.items[j],
                    pos,
                    origin: pos,
                    placed: v[6 + 3 * j + 2] > 0.5,
                }
            })
            .collect();
        let arms = [0, 1].map(|i| {
            let pos = [v[3 * i], v[3 * i + 1]];
            let closed = v[3 * i + 2] > 0.5;
            let held = if closed {
                items
                    .iter()
                    .position(|it| !it.placed && it.pos == pos)
            } else {
                None
            };
            ArmState { pos, closed, held }
        });
        WorldState {
            arms,
            items,
            container_closed: v[6 + 3 * n] > 0.5,
            t: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn salad() -> Sim {
        Sim::new(TaskPlan::salad(), SimConstants::default()).unwrap()
    }

    #[test]
    fn reset_is_deterministic_and_seed_dependent() {
        let sim = salad();
        assert_eq!(sim.reset(5), sim.reset(5));
        assert_ne!(sim.reset(5).items[0].pos, sim.reset(6).items[0].pos);
        let s = sim.reset(5);
        assert!(s.arms.iter().enumerate().all(|(i, a)| a.pos == sim.consts.home[i] && !a.closed));
        assert!(s.items.iter().all(|i| !i.placed));
        assert!(!s.container_closed);
    }

    #[test]
    fn reset_separation_sweep() {
        let sim = salad();
        for seed in 0..1000 {
            let s = sim.reset(seed);
            for a in 0..s.items.len() {
                for b in a + 1..s.items.len() {
                    assert!(dist(s.items[a].pos, s.items[b].pos) >= 0.08, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn zero_action_only_advances_time() {
        let sim = salad();
        let mut s = sim.reset(1);
        let before = s.clone();
        sim.step(&mut s, &[0.0; ACTION_DIM]);
        assert_eq!(s.t, 1);
        s.t = 0;
        assert_eq!(s, before);
    }

    #[test]
    fn velocity_is_clipped_and_positions_clamped() {
        let sim = salad();
        let mut s = sim.reset(1);
        let start = s.arms[0].pos;
        sim.step(&mut s, &[1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((s.arms[0].pos[0] - (start[0] + 0.05)).abs() < 1e-12);
        assert!((s.arms[0].pos[1] - (start[1] - 0.05)).abs() < 1e-12);
        for _ in 0..100 {
            sim.step(&mut s, &[-1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        }
        assert_eq!(s.arms[0].pos, [0.0, 0.0]);
    }

    #[test]
    fn closing_at_item_grasps_it() {
        let sim = salad();
        let mut s = sim.reset(3);
        s.arms[1].pos = s.items[2].pos;
        let events = sim.step(&mut s, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(s.arms[1].held, Some(2));
        assert_eq!(events, vec![StepEvent::Grasped { arm: 1, item: 2 }]);
        // carried along
        sim.step(&mut s, &[0.0, 0.0, 0.0, 0.03, 0.0, 1.0]);
        assert_eq!(s.items[2].pos, s.arms[1].pos);
    }

    #[test]
    fn release_far_from_container_drops() {
        let sim = salad();
        let mut s = sim.reset(3);
        s.arms[1].pos = s.items[2].pos;
        sim.step(&mut s, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let ev = sim.step(&mut s, &[0.0; ACTION_DIM]);
        assert_eq!(ev, vec![StepEvent::Dropped { arm: 1, item: 2 }]);
        assert!(!s.items[2].placed);
    }

    #[test]
    fn container_close_requires_all_placed_and_both_arms() {
        let sim = salad();
        let mut s = sim.reset(2);
        let c = sim.consts.container;
        s.arms[0].pos = [c[0] - 0.04, c[1]];
        s.arms[1].pos = [c[0] + 0.04, c[1]];
        sim.step(&mut s, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(!s.container_closed, "items not placed yet");
        sim.preplace(&mut s, 6);
        sim.step(&mut s, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(!s.container_closed, "one arm open");
        sim.step(&mut s, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(s.container_closed);
    }

    #[test]
    fn decode_round_trips_observable_state() {
        let sim = salad();
        let mut s = sim.reset(8);
        s.arms[1].pos = s.items[3].pos;
        sim.step(&mut s, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let d = sim.decode_state(&sim.state_vector(&s));
        assert_eq!(d.arms, s.arms);
        assert_eq!(sim.state_vector(&d), sim.state_vector(&s));
    }

    #[test]
    fn observation_flags_are_binary() {
        let sim = salad();
        let s = sim.reset(4);
        let v = sim.state_vector(&s);
        assert_eq!(v.len(), sim.state_dim());
        for i in sim.flag_indices() {
            assert!(v[i] == 0.0 || v[i] == 1.0);
        }
    }
}
