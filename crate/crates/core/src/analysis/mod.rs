//! Evaluation statistics over prediction logs and execution records, and the
//! versioned metrics report with its flat CSV companion.

mod log;
mod stats;

pub use log::{threshold_sweep, LogPhase, PredictionEntry, PredictionLog, SweepPoint};
pub use stats::{
    histogram_entropy, kolmogorov_q, ks_p_value, ks_statistic, ks_two_sample, KsResult,
    DEFAULT_BINS,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{summarize, ExecError, ExecutionRecord, RolloutMode};
use crate::model::ModelError;
use crate::simenv::TaskPlan;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error("records disagree: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRate {
    pub index: usize,
    pub prompt_id: usize,
    pub prompt_text: String,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessTable {
    pub plan: String,
    pub mode: RolloutMode,
    pub episodes: usize,
    pub positions: Vec<PositionRate>,
    pub overall: f64,
    /// Mean of the per-record sequence error count.
    pub mean_sequence_errors: f64,
    pub mean_oracle_sequence_errors: f64,
}

impl SuccessTable {
    /// Mean success over plan positions.
    pub fn mean_position_rate(&self) -> f64 {
        self.positions.iter().map(|p| p.rate).sum::<f64>() / self.positions.len().max(1) as f64
    }
}

pub fn success_table(records: &[ExecutionRecord], plan: &TaskPlan) -> Result<SuccessTable, AnalysisError> {
    if let Some(r) = records
        .iter()
        .find(|r| r.plan != plan.name || r.position_success.len() != plan.len())
    {
        return Err(AnalysisError::PlanMismatch(format!(
            "record for seed {} is for plan '{}' with {} positions, expected '{}' with {}",
            r.seed,
            r.plan,
            r.position_success.len(),
            plan.name,
            plan.len()
        )));
    }
    let s = summarize(records).map_err(|e| match e {
        ExecError::NoRecords => AnalysisError::Empty("execution records"),
        other => AnalysisError::PlanMismatch(other.to_string()),
    })?;
    let positions = s
        .position_success
        .iter()
        .enumerate()
        .map(|(index, &rate)| {
            let st = plan.step(index);
            PositionRate {
                index,
                prompt_id: st.prompt_id,
                prompt_text: st.prompt_text.clone(),
                rate,
            }
        })
        .collect();
    Ok(SuccessTable {
        plan: s.plan,
        mode: s.mode,
        episodes: s.episodes,
        positions,
        overall: s.overall_success,
        mean_sequence_errors: s.mean_sequence_errors,
        mean_oracle_sequence_errors: s.mean_oracle_sequence_errors,
    })
}

/// Confidence statistics of one sample of p values split by phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub n_execution: usize,
    pub n_completion: usize,
    /// Entropy of all p values, both phases pooled.
    pub entropy: f64,
    pub entropy_execution: f64,
    pub entropy_completion: f64,
    pub ks_d: f64,
    pub ks_p: f64,
    pub mean_p_execution: f64,
    pub mean_p_completion: f64,
}

impl PhaseMetrics {
    pub fn compute(exec: &[f64], comp: &[f64], bins: usize) -> Result<Self, AnalysisError> {
        if exec.is_empty() {
            return Err(AnalysisError::Empty("execution-phase samples"));
        }
        if comp.is_empty() {
            return Err(AnalysisError::Empty("completion-phase samples"));
        }
        let all: Vec<f64> = exec.iter().chain(comp).copied().collect();
        let ks = ks_two_sample(exec, comp)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Self {
            n_execution: exec.len(),
            n_completion: comp.len(),
            entropy: histogram_entropy(&all, bins)?,
            entropy_execution: histogram_entropy(exec, bins)?,
            entropy_completion: histogram_entropy(comp, bins)?,
            ks_d: ks.d,
            ks_p: ks.p_value,
            mean_p_execution: mean(exec),
            mean_p_completion: mean(comp),
        })
    }

    fn rows(&self) -> [(&'static str, f64); 9] {
        [
            ("entropy", self.entropy),
            ("entropy_execution", self.entropy_execution),
            ("entropy_completion", self.entropy_completion),
            ("ks_d", self.ks_d),
            ("ks_p", self.ks_p),
            ("mean_p_execution", self.mean_p_execution),
            ("mean_p_completion", self.mean_p_completion),
            ("n_execution", self.n_execution as f64),
            ("n_completion", self.n_completion as f64),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskMetrics {
    pub prompt_id: usize,
    pub prompt_text: String,
    pub metrics: PhaseMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyMetrics {
    pub strategy: String,
    pub seed: u64,
    pub overall: PhaseMetrics,
    pub subtasks: Vec<SubtaskMetrics>,
    pub sweep: Vec<SweepPoint>,
}

/// Per-seed pairing of the joint and sequential strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointVsSequential {
    pub seeds: Vec<u64>,
    pub joint_entropy: Vec<f64>,
    pub sequential_entropy: Vec<f64>,
    pub joint_ks_d: Vec<f64>,
    pub sequential_ks_d: Vec<f64>,
    pub joint_lower_entropy: usize,
    pub joint_higher_ks_d: usize,
}

impl JointVsSequential {
    pub fn entropy_majority(&self) -> bool {
        2 * self.joint_lower_entropy > self.seeds.len()
    }

    pub fn ks_majority(&self) -> bool {
        2 * self.joint_higher_ks_d > self.seeds.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessEntry {
    pub strategy: String,
    pub seed: u64,
    pub table: SuccessTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub task: String,
    pub bins: usize,
    pub thresholds: Vec<f64>,
    pub config_hash: String,
    pub strategies: Vec<StrategyMetrics>,
    /// Absent unless both J and S logs share at least one seed.
    pub comparison: Option<JointVsSequential>,
    pub success: Vec<SuccessEntry>,
}

pub fn default_thresholds() -> Vec<f64> {
    (1..10).map(|i| i as f64 / 10.0).collect()
}

pub fn compare_strategies(
    logs: &[PredictionLog],
    plan: &TaskPlan,
    bins: usize,
    thresholds: &[f64],
) -> Result<MetricsReport, AnalysisError> {
    if logs.is_empty() {
        return Err(AnalysisError::Empty("prediction logs"));
    }
    let mut strategies = Vec::with_capacity(logs.len());
    for log in logs {
        if log.plan != plan.name {
            return Err(AnalysisError::PlanMismatch(format!(
                "log {}/{} is for plan '{}', expected '{}'",
                log.strategy, log.seed, log.plan, plan.name
            )));
        }
        log.validate()?;
        let overall = PhaseMetrics::compute(
            &log.values(None, Some(LogPhase::Execution)),
            &log.values(None, Some(LogPhase::Completion)),
            bins,
        )?;
        let subtasks = log
            .prompts()
            .into_iter()
            .map(|id| {
                let prompt_text = plan
                    .subtasks
                    .iter()
                    .find(|s| s.prompt_id == id)
                    .map(|s| s.prompt_text.clone())
                    .ok_or_else(|| AnalysisError::Invalid(format!("prompt {id} is not in plan {}", plan.name)))?;
                Ok(SubtaskMetrics {
                    prompt_id: id,
                    prompt_text,
                    metrics: PhaseMetrics::compute(
                        &log.values(Some(id), Some(LogPhase::Execution)),
                        &log.values(Some(id), Some(LogPhase::Completion)),
                        bins,
                    )?,
                })
            })
            .collect::<Result<Vec<_>, AnalysisError>>()?;
        strategies.push(StrategyMetrics {
            strategy: log.strategy.clone(),
            seed: log.seed,
            overall,
            subtasks,
            sweep: threshold_sweep(log, thresholds),
        });
    }
    let comparison = joint_vs_sequential(&strategies);
    Ok(MetricsReport {
        format_version: REPORT_FORMAT_VERSION,
        task: plan.name.clone(),
        bins,
        thresholds: thresholds.to_vec(),
        config_hash: String::new(),
        strategies,
        comparison,
        success: Vec::new(),
    })
}

fn joint_vs_sequential(metrics: &[StrategyMetrics]) -> Option<JointVsSequential> {
    let pick = |name: &str| -> BTreeMap<u64, &PhaseMetrics> {
        metrics
            .iter()
            .filter(|m| m.strategy.eq_ignore_ascii_case(name))
            .map(|m| (m.seed, &m.overall))
            .collect()
    };
    let (j, s) = (pick("J"), pick("S"));
    let seeds: Vec<u64> = j.keys().filter(|k| s.contains_key(k)).copied().collect();
    if seeds.is_empty() {
        return None;
    }
    let col = |m: &BTreeMap<u64, &PhaseMetrics>, f: fn(&PhaseMetrics) -> f64| -> Vec<f64> {
        seeds.iter().map(|k| f(m[k])).collect()
    };
    let joint_entropy = col(&j, |m| m.entropy);
    let sequential_entropy = col(&s, |m| m.entropy);
    let joint_ks_d = col(&j, |m| m.ks_d);
    let sequential_ks_d = col(&s, |m| m.ks_d);
    let count = |a: &[f64], b: &[f64]| a.iter().zip(b).filter(|(x, y)| x < y).count();
    Some(JointVsSequential {
        joint_lower_entropy: count(&joint_entropy, &sequential_entropy),
        joint_higher_ks_d: count(&sequential_ks_d, &joint_ks_d),
        seeds,
        joint_entropy,
        sequential_entropy,
        joint_ks_d,
        sequential_ks_d,
    })
}

impl MetricsReport {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |what: String| Err(AnalysisError::Invalid(what));
        if self.format_version != REPORT_FORMAT_VERSION {
            return bad(format!("unsupported report format_version {}", self.format_version));
        }
        let max_h = (self.bins as f64).ln() + 1e-9;
        for s in &self.strategies {
            let all = std::iter::once(&s.overall).chain(s.subtasks.iter().map(|t| &t.metrics));
            for m in all {
                if !(0.0..=max_h).contains(&m.entropy) {
                    return bad(format!("{}/{}: entropy {} out of range", s.strategy, s.seed, m.entropy));
                }
                if !(0.0..=1.0).contains(&m.ks_d) || !(0.0..=1.0).contains(&m.ks_p) {
                    return bad(format!("{}/{}: KS values out of range", s.strategy, s.seed));
                }
            }
            for pt in &s.sweep {
                if (pt.correct + pt.premature + pt.never - 1.0).abs() > 1e-9 {
                    return bad(format!("{}/{}: sweep rates do not sum to 1", s.strategy, s.seed));
                }
            }
        }
        for e in &self.success {
            let t = &e.table;
            let rates = t.positions.iter().map(|p| p.rate).chain(std::iter::once(t.overall));
            if rates.into_iter().any(|r| !(0.0..=1.0).contains(&r)) {
                return bad(format!("{}/{}: success rate out of range", e.strategy, e.seed));
            }
        }
        Ok(())
    }

    /// Flat rows: `strategy,seed,task,subtask,metric,value`. Subtask is
    /// `overall`, the prompt text, or `theta=<x>` for sweep rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["strategy", "seed", "task", "subtask", "metric", "value"])
            .expect("writing to memory");
        let mut row = |strategy: &str, seed: u64, subtask: &str, metric: &str, value: f64| {
            w.write_record([strategy, &seed.to_string(), &self.task, subtask, metric, &value.to_string()])
                .expect("writing to memory");
        };
        for s in &self.strategies {
            for (metric, v) in s.overall.rows() {
                row(&s.strategy, s.seed, "overall", metric, v);
            }
            for t in &s.subtasks {
                for (metric, v) in t.metrics.rows() {
                    row(&s.strategy, s.seed, &t.prompt_text, metric, v);
                }
            }
            for pt in &s.sweep {
                let key = format!("theta={}", pt.threshold);
                row(&s.strategy, s.seed, &key, "sweep_correct", pt.correct);
                row(&s.strategy, s.seed, &key, "sweep_premature", pt.premature);
                row(&s.strategy, s.seed, &key, "sweep_never", pt.never);
            }
        }
        for e in &self.success {
            for p in &e.table.positions {
                let key = format!("{}#{}", p.prompt_text, p.index);
                row(&e.strategy, e.seed, &key, "success_rate", p.rate);
            }
            row(&e.strategy, e.seed, "overall", "success_rate", e.table.overall);
            row(&e.strategy, e.seed, "overall", "mean_sequence_errors", e.table.mean_sequence_errors);
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 fields")
    }
}
