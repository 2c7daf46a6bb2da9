//! Dual-head flow-matching policy.
//!
//! A context encoder embeds the observation; the action expert consumes the
//! embedding plus a noisy action chunk and the interpolation time and produces
//! a shared feature vector. Two heads read that same vector: the flow head
//! predicts the velocity field, the completion head produces the probability
//! `p` that the current subtask should continue.

mod batch;
mod policy;

pub use batch::{ActionNormalizer, FlowBatch};
pub use policy::{LossBreakdown, LossWeights, PolicyConfig, PolicyNet, SharedOutput};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::DiffError;

/// Lower clamp for probabilities inside the cross-entropy logarithms.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("non-finite values in {stage}")]
    NonFinite { stage: &'static str },
    #[error("empty batch")]
    EmptyBatch,
    #[error("interpolation time {0} outside [0, 1]")]
    TauOutOfRange(f64),
    #[error("length mismatch: {what} expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid observation context: {0}")]
    InvalidContext(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("integration steps must be at least 1")]
    NoSteps,
}

/// Observation state vector plus the prompt as a one-hot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationContext {
    state: Vec<f64>,
    prompt: usize,
    n_prompts: usize,
}

impl ObservationContext {
    pub fn new(state: Vec<f64>, prompt: usize, n_prompts: usize) -> Result<Self, ModelError> {
        if prompt >= n_prompts {
            return Err(ModelError::InvalidContext(format!(
                "prompt {prompt} outside vocabulary of {n_prompts}"
            )));
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidContext("non-finite state entry".into()));
        }
        Ok(Self {
            state,
            prompt,
            n_prompts,
        })
    }

    /// Parses a flattened context whose last `n_prompts` entries are a one-hot.
    pub fn from_flat(flat: &[f64], n_prompts: usize) -> Result<Self, ModelError> {
        if flat.len() < n_prompts {
            return Err(ModelError::InvalidContext("shorter than the prompt one-hot".into()));
        }
        let (state, onehot) = flat.split_at(flat.len() - n_prompts);
        let hot: Vec<usize> = onehot
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        if hot.len() != 1 || onehot[hot[0]] != 1.0 {
            return Err(ModelError::InvalidContext("prompt is not a one-hot".into()));
        }
        Self::new(state.to_vec(), hot[0], n_prompts)
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn prompt(&self) -> usize {
        self.prompt
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn dim(&self) -> usize {
        self.state.len() + self.n_prompts
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.state.clone();
        v.extend((0..self.n_prompts).map(|i| if i == self.prompt { 1.0 } else { 0.0 }));
        v
    }
}

/// `horizon` consecutive actions of `action_dim` entries, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub data: Vec<f64>,
    pub horizon: usize,
    pub action_dim: usize,
}

impl ActionChunk {
    pub fn new(data: Vec<f64>, horizon: usize, action_dim: usize) -> Result<Self, ModelError> {
        if data.len() != horizon * action_dim {
            return Err(ModelError::LengthMismatch {
                what: "action chunk",
                expected: horizon * action_dim,
                got: data.len(),
            });
        }
        Ok(Self {
            data,
            horizon,
            action_dim,
        })
    }

    pub fn action(&self, k: usize) -> &[f64] {
        &self.data[k * self.action_dim..(k + 1) * self.action_dim]
    }
}

/// Straight-line path `(1 - tau) * a0 + tau * a1`.
pub fn interpolate_actions(a0: &[f64], a1: &[f64], tau: f64) -> Result<Vec<f64>, ModelError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(ModelError::TauOutOfRange(tau));
    }
    if a0.len() != a1.len() {
        return Err(ModelError::LengthMismatch {
            what: "interpolation endpoints",
            expected: a0.len(),
            got: a1.len(),
        });
    }
    Ok(a0
        .iter()
        .zip(a1)
        .map(|(x0, x1)| (1.0 - tau) * x0 + tau * x1)
        .collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of prediction `p` against label `y`, with `p`
/// clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn completion_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a0 = [0.3, -1.7, 2.0];
        let a1 = [5.0, 0.25, -3.0];
        assert_eq!(interpolate_actions(&a0, &a1, 0.0).unwrap(), a0.to_vec());
        assert_eq!(interpolate_actions(&a0, &a1, 1.0).unwrap(), a1.to_vec());
        assert_eq!(
            interpolate_actions(&[0.0, 0.0], &[2.0, 4.0], 0.5).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            interpolate_actions(&a0, &a1, 1.5),
            Err(ModelError::TauOutOfRange(1.5))
        );
        assert!(interpolate_actions(&a0, &a1, -0.1).is_err());
        assert!(interpolate_actions(&a0, &[1.0], 0.5).is_err());
    }

    #[test]
    fn bce_values() {
        assert!(completion_loss(1.0, 1.0) < 1e-11);
        assert!((completion_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((completion_loss(0.9, 0.0) - (-(0.1f64).ln())).abs() < 1e-12);
        assert!((completion_loss(0.9, 0.0) - 2.302585).abs() < 1e-6);
        assert!(completion_loss(0.0, 1.0).is_finite());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn context_round_trip_and_validation() {
        let ctx = ObservationContext::new(vec![0.1, 0.2], 1, 3).unwrap();
        assert_eq!(ctx.to_vec(), vec![0.1, 0.2, 0.0, 1.0, 0.0]);
        assert_eq!(ObservationContext::from_flat(&ctx.to_vec(), 3).unwrap(), ctx);
        assert!(ObservationContext::new(vec![0.0], 3, 3).is_err());
        assert!(ObservationContext::from_flat(&[0.0, 1.0, 1.0], 2).is_err());
        assert!(ObservationContext::new(vec![f64::NAN], 0, 1).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bce_monotone_in_p(a in 1e-9f64..1.0, b in 1e-9f64..1.0) {
                prop_assume!(a < b && b < 1.0 - 1e-9);
                prop_assert!(completion_loss(b, 1.0) < completion_loss(a, 1.0));
                prop_assert!(completion_loss(b, 0.0) > completion_loss(a, 0.0));
                prop_assert!(completion_loss(a, 1.0) >= 0.0);
            }

            #[test]
            fn sigmoid_in_open_interval(x in -30.0f64..30.0) {
                let p = sigmoid(x);
                prop_assert!(p > 0.0 && p < 1.0);
            }
        }
    }
}
