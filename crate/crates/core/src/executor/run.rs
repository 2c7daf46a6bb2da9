use serde::{Deserialize, Serialize};

use super::{
    ExecError, ExecutionRecord, OracleEvent, Outcome, Policy, RolloutConfig, RolloutMode,
    SubtaskRecord,
};
use crate::simenv::{dist, Action, Sim, StepEvent, TaskPlan, Target, WorldState, ACTION_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeqPhase {
    Executing,
    Transitioning,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequencerState {
    pub plan: TaskPlan,
    pub index: usize,
    pub phase: SeqPhase,
    pub records: Vec<SubtaskRecord>,
    pub total_steps: usize,
}

impl SequencerState {
    pub fn new(plan: TaskPlan) -> Self {
        let phase = if plan.is_empty() {
            SeqPhase::Done
        } else {
            SeqPhase::Executing
        };
        Self {
            plan,
            index: 0,
            phase,
            records: Vec::new(),
            total_steps: 0,
        }
    }
}

/// Steps the world and appends completions to `events`. Returns the number of
/// repeat attempts seen.
fn step_world(sim: &Sim, world: &mut WorldState, a: &Action, events: &mut Vec<OracleEvent>) -> usize {
    let t = world.t;
    let mut repeats = 0;
    for e in sim.step(world, a) {
        match e {
            StepEvent::Placed { item, .. } => {
                if let Some(s) = sim.subtask_for_kind(sim.plan.items[item]) {
                    events.push(OracleEvent { t, subtask: s });
                }
            }
            StepEvent::ContainerClosed => {
                if let Some(s) = sim
                    .plan
                    .subtasks
                    .iter()
                    .position(|s| s.target == Target::CloseContainer)
                {
                    events.push(OracleEvent { t, subtask: s });
                }
            }
            StepEvent::RepeatAttempt { .. } => repeats += 1,
            _ => {}
        }
    }
    repeats
}

fn chunk_action(data: &[f64], k: usize) -> Action {
    let mut a = [0.0; ACTION_DIM];
    a.copy_from_slice(&data[k * ACTION_DIM..(k + 1) * ACTION_DIM]);
    a
}

fn infer<P: Policy + ?Sized>(
    policy: &mut P,
    sim: &Sim,
    world: &WorldState,
    prompt: usize,
) -> Result<(Vec<f64>, f64), ExecError> {
    let (chunk, p) = policy.infer(&sim.observe(world, prompt))?;
    let expected = policy.horizon() * ACTION_DIM;
    if chunk.data.len() != expected {
        return Err(ExecError::ChunkShape {
            expected,
            got: chunk.data.len(),
        });
    }
    Ok((chunk.data, p))
}

/// Runs plan position `index` until the policy signals completion or the
/// budget runs out. `p` is checked on every inference before its chunk
/// executes, so a signal stops the arms immediately.
pub fn run_subtask<P: Policy + ?Sized>(
    sim: &Sim,
    world: &mut WorldState,
    policy: &mut P,
    index: usize,
    cfg: &RolloutConfig,
    events: &mut Vec<OracleEvent>,
) -> Result<(SubtaskRecord, usize), ExecError> {
    let spec = sim.plan.step(index).clone();
    let mut rec = SubtaskRecord {
        plan_index: index,
        prompt_id: spec.prompt_id,
        prompt_text: spec.prompt_text.clone(),
        outcome: Outcome::BudgetExhausted,
        steps: 0,
        homing_steps: 0,
        p_trace: Vec::new(),
        oracle_success: false,
    };
    let mut below = 0;
    let mut repeats = 0;
    'outer: while rec.steps < cfg.subtask_budget {
        let (data, p) = infer(policy, sim, world, spec.prompt_id)?;
        rec.p_trace.push(p);
        below = if p < cfg.theta_stop { below + 1 } else { 0 };
        if below >= cfg.consecutive_signals {
            rec.outcome = Outcome::Signaled;
            break;
        }
        if !p.is_finite() || data.iter().any(|v| !v.is_finite()) {
            rec.outcome = Outcome::Failed;
            break;
        }
        let n = cfg.execute_steps.unwrap_or(policy.horizon()).min(policy.horizon());
        for k in 0..n {
            if rec.steps >= cfg.subtask_budget {
                break 'outer;
            }
            repeats += step_world(sim, world, &chunk_action(&data, k), events);
            rec.steps += 1;
        }
    }
    let goal = sim.plan.goal(index);
    rec.oracle_success = sim.goal_achieved(world, &goal);
    Ok((rec, repeats))
}

/// Drives both arms in straight lines to `home` with grippers open.
/// Returns the number of steps, or `None` if the budget ran out.
pub fn home_arms(
    sim: &Sim,
    world: &mut WorldState,
    cfg: &RolloutConfig,
    events: &mut Vec<OracleEvent>,
) -> Option<usize> {
    let at_home = |w: &WorldState| {
        (0..2).all(|i| dist(w.arms[i].pos, cfg.home[i]) <= 1e-9 && !w.arms[i].closed)
    };
    let mut steps = 0;
    while !at_home(world) {
        if steps >= cfg.home_budget {
            return None;
        }
        let mut a = [0.0; ACTION_DIM];
        for i in 0..2 {
            let d = [cfg.home[i][0] - world.arms[i].pos[0], cfg.home[i][1] - world.arms[i].pos[1]];
            let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
            let s = if n > sim.consts.max_step { sim.consts.max_step / n } else { 1.0 };
            a[3 * i] = d[0] * s;
            a[3 * i + 1] = d[1] * s;
        }
        step_world(sim, world, &a, events);
        steps += 1;
        if (0..2).all(|i| dist(world.arms[i].pos, cfg.home[i]) <= 1e-9) {
            for i in 0..2 {
                world.arms[i].pos = cfg.home[i];
            }
        }
    }
    Some(steps)
}

/// Stop, home, advance the prompt.
pub fn transition(
    state: &mut SequencerState,
    sim: &Sim,
    world: &mut WorldState,
    cfg: &RolloutConfig,
    events: &mut Vec<OracleEvent>,
) -> Result<(), ExecError> {
    if state.phase != SeqPhase::Transitioning {
        return Err(ExecError::NotTransitioning(state.phase));
    }
    let homed = home_arms(sim, world, cfg, events);
    let goal = sim.plan.goal(state.index);
    let rec = state.records.last_mut().expect("a subtask ran before the transition");
    rec.oracle_success = sim.goal_achieved(world, &goal);
    match homed {
        None => {
            rec.homing_steps = cfg.home_budget;
            state.total_steps += cfg.home_budget;
            state.phase = SeqPhase::Failed;
        }
        Some(n) => {
            rec.homing_steps = n;
            state.total_steps += n;
            state.index += 1;
            state.phase = if state.index >= state.plan.len() {
                SeqPhase::Done
            } else {
                SeqPhase::Executing
            };
        }
    }
    Ok(())
}

/// Out-of-order completions: each event claims the earliest unclaimed plan
/// position of its subtask, and counts as an error unless that position
/// directly follows the previously claimed one.
pub fn count_out_of_order(plan: &TaskPlan, events: &[OracleEvent]) -> (usize, Vec<bool>) {
    let mut claimed = vec![false; plan.len()];
    let mut last: Option<usize> = None;
    let mut errors = 0;
    for e in events {
        let Some(pos) = (0..plan.len()).find(|&i| !claimed[i] && plan.sequence[i] == e.subtask) else {
            errors += 1;
            continue;
        };
        claimed[pos] = true;
        let expected = last.map_or(0, |l| l + 1);
        if pos != expected {
            errors += 1;
        }
        last = Some(pos);
    }
    (errors, claimed)
}

/// SeqVLA execution of the whole plan from `sim.reset(seed)`.
pub fn run_long_horizon<P: Policy + ?Sized>(
    sim: &Sim,
    policy: &mut P,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<ExecutionRecord, ExecError> {
    cfg.validate()?;
    let mut world = sim.reset(seed);
    let mut state = SequencerState::new(sim.plan.clone());
    let mut events = Vec::new();
    let mut repeats = 0;
    while state.phase == SeqPhase::Executing {
        let (rec, r) = run_subtask(sim, &mut world, policy, state.index, cfg, &mut events)?;
        repeats += r;
        state.total_steps += rec.steps;
        let outcome = rec.outcome;
        state.records.push(rec);
        if outcome == Outcome::Signaled {
            state.phase = SeqPhase::Transitioning;
            transition(&mut state, sim, &mut world, cfg, &mut events)?;
        } else {
            state.phase = SeqPhase::Failed;
        }
    }
    let mut position_success = vec![false; sim.plan.len()];
    for r in &state.records {
        position_success[r.plan_index] = r.oracle_success;
    }
    let prompts: Vec<usize> = state.records.iter().map(|r| r.prompt_id).collect();
    let sequence_errors = usize::from(!sim.plan.prompt_sequence().starts_with(&prompts));
    let (oracle_errors, _) = count_out_of_order(&sim.plan, &events);
    Ok(ExecutionRecord {
        mode: RolloutMode::Seqvla,
        plan: sim.plan.name.clone(),
        seed,
        subtasks: state.records,
        overall_success: position_success.iter().all(|&s| s),
        position_success,
        sequence_errors,
        oracle_sequence_errors: oracle_errors,
        repeat_attempts: repeats,
        events,
        total_steps: state.total_steps,
        p_trace: Vec::new(),
        config_hash: String::new(),
    })
}

/// Plan position `index` alone, from `sim.reset(seed)` with the earlier
/// positions preplaced. A signal is followed by homing, and the record's
/// `oracle_success` is read after it, as in [`run_long_horizon`]. A failed
/// homing clears `oracle_success`.
pub fn run_isolated_subtask<P: Policy + ?Sized>(
    sim: &Sim,
    policy: &mut P,
    cfg: &RolloutConfig,
    seed: u64,
    index: usize,
) -> Result<SubtaskRecord, ExecError> {
    cfg.validate()?;
    if index >= sim.plan.len() {
        return Err(ExecError::Config(format!(
            "plan position {index} is out of range for plan {}",
            sim.plan.name
        )));
    }
    let mut world = sim.reset(seed);
    sim.preplace(&mut world, index);
    let mut events = Vec::new();
    let (mut rec, _) = run_subtask(sim, &mut world, policy, index, cfg, &mut events)?;
    if rec.outcome == Outcome::Signaled {
        let homed = home_arms(sim, &mut world, cfg, &mut events);
        rec.homing_steps = homed.unwrap_or(cfg.home_budget);
        rec.oracle_success = homed.is_some() && sim.goal_achieved(&world, &sim.plan.goal(index));
    }
    Ok(rec)
}

/// Monolithic baseline: the task-level prompt, chunk after chunk, until the
/// whole task is done or `subtask_budget * plan length` steps have elapsed.
pub fn run_baseline_open_loop<P: Policy + ?Sized>(
    sim: &Sim,
    policy: &mut P,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<ExecutionRecord, ExecError> {
    cfg.validate()?;
    let mut world = sim.reset(seed);
    let budget = cfg.subtask_budget * sim.plan.len();
    let prompt = sim.plan.task_prompt_id();
    let mut events = Vec::new();
    let mut repeats = 0;
    let mut p_trace = Vec::new();
    let mut steps = 0;
    let done = |w: &WorldState| w.container_closed;
    while steps < budget && !done(&world) {
        let (data, p) = infer(policy, sim, &world, prompt)?;
        p_trace.push(p);
        if data.iter().any(|v| !v.is_finite()) {
            break;
        }
        let n = cfg.execute_steps.unwrap_or(policy.horizon()).min(policy.horizon());
        for k in 0..n {
            if steps >= budget || done(&world) {
                break;
            }
            repeats += step_world(sim, &mut world, &chunk_action(&data, k), &mut events);
            steps += 1;
        }
    }
    let (out_of_order, claimed) = count_out_of_order(&sim.plan, &events);
    Ok(ExecutionRecord {
        mode: RolloutMode::Baseline,
        plan: sim.plan.name.clone(),
        seed,
        subtasks: Vec::new(),
        overall_success: claimed.iter().all(|&c| c),
        position_success: claimed,
        sequence_errors: out_of_order + repeats,
        oracle_sequence_errors: out_of_order,
        repeat_attempts: repeats,
        events,
        total_steps: steps,
        p_trace,
        config_hash: String::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub mode: RolloutMode,
    pub plan: String,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub position_success: Vec<f64>,
    pub overall_success: f64,
    pub mean_sequence_errors: f64,
    pub mean_oracle_sequence_errors: f64,
    pub config_hash: String,
}

pub fn summarize(records: &[ExecutionRecord]) -> Result<BatchSummary, ExecError> {
    let first = records.first().ok_or(ExecError::NoRecords)?;
    if records.iter().any(|r| r.plan != first.plan || r.mode != first.mode) {
        return Err(ExecError::MixedRecords);
    }
    let n = records.len() as f64;
    let k = first.position_success.len();
    let position_success = (0..k)
        .map(|i| records.iter().filter(|r| r.position_success[i]).count() as f64 / n)
        .collect();
    let mean = |f: &dyn Fn(&ExecutionRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(BatchSummary {
        mode: first.mode,
        plan: first.plan.clone(),
        episodes: records.len(),
        seeds: records.iter().map(|r| r.seed).collect(),
        position_success,
        overall_success: mean(&|r| f64::from(u8::from(r.overall_success))),
        mean_sequence_errors: mean(&|r| r.sequence_errors as f64),
        mean_oracle_sequence_errors: mean(&|r| r.oracle_sequence_errors as f64),
        config_hash: first.config_hash.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;
    use crate::simenv::SimConstants;

    fn sim(name: &str) -> Sim {
        Sim::new(TaskPlan::by_name(name).unwrap(), SimConstants::default()).unwrap()
    }

    #[test]
    fn strict_threshold() {
        let s = sim("salad");
        let cfg = RolloutConfig::default();
        for (p, fires) in [(0.19, true), (0.2, false), (0.9, false)] {
            let mut world = s.reset(1);
            let mut pol = ScriptedPolicy::new(vec![p], 0.9, 8);
            let (rec, _) = run_subtask(&s, &mut world, &mut pol, 0, &cfg, &mut Vec::new()).unwrap();
            assert_eq!(rec.outcome == Outcome::Signaled, fires, "p = {p}");
            if fires {
                assert_eq!(rec.steps, 0);
                assert_eq!(rec.p_trace, vec![p]);
            } else {
                assert_eq!(rec.outcome, Outcome::BudgetExhausted);
                assert_eq!(rec.steps, cfg.subtask_budget);
            }
        }
    }

    #[test]
    fn never_signalling_policy_aborts_the_plan() {
        let s = sim("candy");
        let rec = run_long_horizon(&s, &mut ConstantPolicy { p: 0.9, horizon: 8 }, &RolloutConfig::default(), 3).unwrap();
        assert_eq!(rec.subtasks.len(), 1);
        assert_eq!(rec.subtasks[0].outcome, Outcome::BudgetExhausted);
        assert!(!rec.overall_success);
        assert_eq!(rec.sequence_errors, 0);
    }

    #[test]
    fn oracle_stub_completes_both_plans() {
        for name in ["salad", "candy"] {
            let s = sim(name);
            for seed in 0..5 {
                let mut stub = OracleStub::new(s.clone(), 8);
                let rec = run_long_horizon(&s, &mut stub, &RolloutConfig::default(), seed).unwrap();
                assert!(rec.overall_success, "{name} seed {seed}: {:?}", rec.position_success);
                assert_eq!(rec.sequence_errors, 0);
                assert_eq!(rec.oracle_sequence_errors, 0);
                assert_eq!(rec.attempted_prompts(), s.plan.prompt_sequence());
            }
        }
    }

    #[test]
    fn isolated_subtasks_start_from_preplaced_worlds() {
        for name in ["salad", "candy"] {
            let s = sim(name);
            for pos in 0..s.plan.len() {
                let mut stub = OracleStub::with_order(s.clone(), (pos..s.plan.len()).collect(), 8);
                let rec = run_isolated_subtask(&s, &mut stub, &RolloutConfig::default(), 4, pos).unwrap();
                assert_eq!(rec.plan_index, pos);
                assert_eq!(rec.outcome, Outcome::Signaled);
                assert!(rec.oracle_success, "{name} position {pos}");
            }
            let mut idle = ConstantPolicy { p: 0.9, horizon: 8 };
            let rec = run_isolated_subtask(&s, &mut idle, &RolloutConfig::default(), 4, 0).unwrap();
            assert!(!rec.oracle_success);
            assert!(run_isolated_subtask(&s, &mut idle, &RolloutConfig::default(), 4, s.plan.len()).is_err());
        }
    }

    #[test]
    fn homing_from_home_takes_no_steps() {
        let s = sim("salad");
        let mut world = s.reset(0);
        assert_eq!(home_arms(&s, &mut world, &RolloutConfig::default(), &mut Vec::new()), Some(0));
        world.arms[0].pos = [0.5, 0.5];
        let n = home_arms(&s, &mut world, &RolloutConfig::default(), &mut Vec::new()).unwrap();
        assert!(n > 0 && n <= 100);
        assert_eq!(world.arms[0].pos, s.consts.home[0]);
    }

    #[test]
    fn transition_advances_or_finishes() {
        let s = sim("candy");
        let cfg = RolloutConfig::default();
        let mut world = s.reset(0);
        let mut st = SequencerState::new(s.plan.clone());
        assert_eq!(
            transition(&mut st, &s, &mut world, &cfg, &mut Vec::new()),
            Err(ExecError::NotTransitioning(SeqPhase::Executing))
        );
        let (rec, _) = run_subtask(&s, &mut world, &mut ScriptedPolicy::new(vec![0.0], 0.0, 8), 0, &cfg, &mut Vec::new()).unwrap();
        st.records.push(rec.clone());
        st.phase = SeqPhase::Transitioning;
        transition(&mut st, &s, &mut world, &cfg, &mut Vec::new()).unwrap();
        assert_eq!((st.index, st.phase), (1, SeqPhase::Executing));
        st.index = s.plan.len() - 1;
        st.records.push(rec);
        st.phase = SeqPhase::Transitioning;
        transition(&mut st, &s, &mut world, &cfg, &mut Vec::new()).unwrap();
        assert_eq!(st.phase, SeqPhase::Done);
    }

    #[test]
    fn baseline_expert_stub_has_no_sequence_errors() {
        for name in ["salad", "candy"] {
            let s = sim(name);
            let mut stub = OracleStub::new(s.clone(), 8);
            let rec = run_baseline_open_loop(&s, &mut stub, &RolloutConfig::default(), 4).unwrap();
            assert!(rec.overall_success, "{name}");
            assert_eq!(rec.sequence_errors, 0);
            let order: Vec<usize> = rec.events.iter().map(|e| e.subtask).collect();
            assert_eq!(order, s.plan.sequence);
        }
    }

    #[test]
    fn skipping_a_subtask_is_one_out_of_order_error() {
        let s = sim("salad");
        let order = vec![0, 2, 3, 4, 5];
        let mut stub = OracleStub::with_order(s.clone(), order, 8);
        let rec = run_baseline_open_loop(&s, &mut stub, &RolloutConfig::default(), 2).unwrap();
        assert_eq!(rec.oracle_sequence_errors, 1);
        assert_eq!(rec.sequence_errors, 1);
        assert!(!rec.overall_success);
        assert!(!rec.position_success[1] && rec.position_success[2]);
    }

    #[test]
    fn out_of_order_counting() {
        let plan = TaskPlan::candy();
        let ev = |v: &[usize]| v.iter().map(|&s| OracleEvent { t: 0, subtask: s }).collect::<Vec<_>>();
        assert_eq!(count_out_of_order(&plan, &ev(&plan.sequence)).0, 0);
        assert_eq!(count_out_of_order(&plan, &ev(&[0, 1, 2, 1, 2, 3])).0, 3);
        assert_eq!(count_out_of_order(&plan, &ev(&[3, 0])).0, 2);
    }

    #[test]
    fn summary_rates() {
        let s = sim("candy");
        let cfg = RolloutConfig::default();
        let mut recs = Vec::new();
        for seed in 0..4 {
            let mut stub = OracleStub::new(s.clone(), 8);
            recs.push(run_long_horizon(&s, &mut stub, &cfg, seed).unwrap());
        }
        recs[3] = run_long_horizon(&s, &mut ConstantPolicy { p: 0.9, horizon: 8 }, &cfg, 9).unwrap();
        let sum = summarize(&recs).unwrap();
        assert_eq!(sum.position_success[0], 0.75);
        assert_eq!(sum.overall_success, 0.75);
        assert_eq!(summarize(&[]), Err(ExecError::NoRecords));
    }
}
