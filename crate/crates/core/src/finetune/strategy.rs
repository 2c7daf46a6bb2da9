use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::LossWeights;

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    J,
    JF,
    S,
    SF,
    #[serde(rename = "BASELINE")]
    Baseline,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [Self::J, Self::JF, Self::S, Self::SF, Self::Baseline];
    pub const SEQVLA: [StrategyKind; 4] = [Self::J, Self::JF, Self::S, Self::SF];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::J => "J",
            Self::JF => "JF",
            Self::S => "S",
            Self::SF => "SF",
            Self::Baseline => "BASELINE",
        }
    }

    pub fn is_baseline(self) -> bool {
        self == Self::Baseline
    }

    /// Whether the context encoder stays frozen in every phase.
    pub fn frozen_backbone(self) -> bool {
        matches!(self, Self::JF | Self::SF)
    }

    pub fn sequential(self) -> bool {
        matches!(self, Self::S | Self::SF)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "J" => Ok(Self::J),
            "JF" => Ok(Self::JF),
            "S" => Ok(Self::S),
            "SF" => Ok(Self::SF),
            "BASELINE" => Ok(Self::Baseline),
            _ => Err(TrainError::UnknownStrategy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Action,
    Completion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub epochs: usize,
    pub freeze: Vec<String>,
    pub losses: Vec<LossTerm>,
}

impl Phase {
    pub fn weights(&self, lambda: f64) -> LossWeights {
        let on = |t| self.losses.contains(&t);
        LossWeights {
            action: if on(LossTerm::Action) { 1.0 } else { 0.0 },
            completion: match (on(LossTerm::Action), on(LossTerm::Completion)) {
                (true, true) => lambda,
                (false, true) => 1.0,
                _ => 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: StrategyKind,
    pub lambda: f64,
    pub phases: Vec<Phase>,
}

fn patterns(p: &[&str]) -> Vec<String> {
    p.iter().map(|s| s.to_string()).collect()
}

impl StrategyConfig {
    /// Default schedule: 30 epochs for single-phase strategies, 20 + 10 for
    /// the sequential ones.
    pub fn new(strategy: StrategyKind) -> Self {
        Self::with_epochs(strategy, 30, (20, 10))
    }

    pub fn with_epochs(strategy: StrategyKind, single: usize, split: (usize, usize)) -> Self {
        use LossTerm::*;
        let backbone: &[&str] = if strategy.frozen_backbone() {
            &["encoder.*"]
        } else {
            &[]
        };
        let phases = match strategy {
            StrategyKind::J | StrategyKind::JF => vec![Phase {
                epochs: single,
                freeze: patterns(backbone),
                losses: vec![Action, Completion],
            }],
            StrategyKind::S | StrategyKind::SF => {
                let mut first = patterns(backbone);
                first.push("completion_head.*".into());
                vec![
                    Phase {
                        epochs: split.0,
                        freeze: first,
                        losses: vec![Action],
                    },
                    Phase {
                        epochs: split.1,
                        freeze: patterns(&["encoder.*", "expert.*", "flow_head.*"]),
                        losses: vec![Completion],
                    },
                ]
            }
            StrategyKind::Baseline => vec![Phase {
                epochs: single,
                freeze: patterns(&["completion_head.*"]),
                losses: vec![Action],
            }],
        };
        Self {
            strategy,
            lambda: DEFAULT_LAMBDA,
            phases,
        }
    }

    /// Checks the schedule against the structural rules of its strategy.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |why: &str| Err(TrainError::InvalidStrategy(format!("{}: {why}", self.strategy)));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        let has = |p: &Phase, pat: &str| p.freeze.iter().any(|f| f == pat);
        let expected_phases = if self.strategy.sequential() { 2 } else { 1 };
        if self.phases.len() != expected_phases {
            return bad("wrong number of phases");
        }
        if self.phases.iter().any(|p| p.epochs == 0) {
            return bad("every phase needs at least one epoch");
        }
        if self.strategy.frozen_backbone() && !self.phases.iter().all(|p| has(p, "encoder.*")) {
            return bad("frozen-backbone strategies must freeze the encoder in every phase");
        }
        let canonical = Self::with_epochs(self.strategy, 1, (1, 1));
        for (p, c) in self.phases.iter().zip(&canonical.phases) {
            let mut a = p.freeze.clone();
            let mut b = c.freeze.clone();
            a.sort();
            b.sort();
            if a != b || p.losses != c.losses {
                return bad("phase masks or losses differ from the strategy definition");
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }
}

/// The (freeze mask, enabled losses) schedule of a strategy.
pub fn build_phase_masks(cfg: &StrategyConfig) -> Result<Vec<(Vec<String>, Vec<LossTerm>)>, TrainError> {
    cfg.validate()?;
    Ok(cfg
        .phases
        .iter()
        .map(|p| (p.freeze.clone(), p.losses.clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use LossTerm::*;

    fn masks(k: StrategyKind) -> Vec<(Vec<String>, Vec<LossTerm>)> {
        build_phase_masks(&StrategyConfig::new(k)).unwrap()
    }

    #[test]
    fn schedules() {
        assert_eq!(masks(StrategyKind::J), vec![(vec![], vec![Action, Completion])]);
        assert_eq!(
            masks(StrategyKind::JF),
            vec![(patterns(&["encoder.*"]), vec![Action, Completion])]
        );
        assert_eq!(
            masks(StrategyKind::S),
            vec![
                (patterns(&["completion_head.*"]), vec![Action]),
                (patterns(&["encoder.*", "expert.*", "flow_head.*"]), vec![Completion]),
            ]
        );
        let sf = masks(StrategyKind::SF);
        assert_eq!(sf[0], (patterns(&["encoder.*", "completion_head.*"]), vec![Action]));
        assert_eq!(sf[1], (patterns(&["encoder.*", "expert.*", "flow_head.*"]), vec![Completion]));
        assert_eq!(
            masks(StrategyKind::Baseline),
            vec![(patterns(&["completion_head.*"]), vec![Action])]
        );
    }

    #[test]
    fn default_budgets_are_equal() {
        for k in StrategyKind::ALL {
            assert_eq!(StrategyConfig::new(k).total_epochs(), 30);
        }
    }

    #[test]
    fn parsing() {
        assert_eq!("sf".parse::<StrategyKind>().unwrap(), StrategyKind::SF);
        assert_eq!("baseline".parse::<StrategyKind>().unwrap(), StrategyKind::Baseline);
        assert!(matches!("K".parse::<StrategyKind>(), Err(TrainError::UnknownStrategy(_))));
        assert_eq!(serde_json::to_string(&StrategyKind::Baseline).unwrap(), "\"BASELINE\"");
    }

    #[test]
    fn invalid_schedules_rejected() {
        let mut c = StrategyConfig::new(StrategyKind::SF);
        c.phases[1].freeze.retain(|f| f != "encoder.*");
        assert!(c.validate().is_err());
        let mut c = StrategyConfig::new(StrategyKind::J);
        c.phases[0].losses = vec![Action];
        assert!(c.validate().is_err());
        let mut c = StrategyConfig::new(StrategyKind::S);
        c.phases.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn phase_weights() {
        let c = StrategyConfig::new(StrategyKind::S);
        assert_eq!(c.phases[0].weights(0.1), LossWeights::action_only());
        assert_eq!(c.phases[1].weights(0.1), LossWeights::completion_only());
        assert_eq!(StrategyConfig::new(StrategyKind::J).phases[0].weights(0.1), LossWeights::total(0.1));
    }
}
