use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepStatus {
    Applied,
    /// A trainable gradient was NaN or infinite; nothing was updated.
    Rejected { param: String },
}

/// Adam with bias-corrected moments. Frozen parameters are skipped entirely,
/// so their values and moments never change.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub(crate) m: Vec<Tensor>,
    pub(crate) v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = |ps: &ParamSet| ps.ids().map(|id| Tensor::zeros(ps.shape(id))).collect();
        Self {
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.v[index]
    }

    /// Applies one update to every trainable parameter, then zeroes all
    /// gradient buffers (frozen ones included).
    pub fn step(&mut self, params: &mut ParamSet) -> StepStatus {
        for id in params.ids() {
            if params.is_trainable(id) && params.grad(id).iter().any(|g| !g.is_finite()) {
                let param = params.name(id).to_string();
                params.zero_grad();
                return StepStatus::Rejected { param };
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            if !params.is_trainable(id) {
                continue;
            }
            let m = &mut self.m[id.0].data;
            let v = &mut self.v[id.0].data;
            let (value, grad) = params.value_and_grad_mut(id);
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        params.zero_grad();
        StepStatus::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.register(
            "x",
            Tensor {
                shape: vec![1],
                data: vec![v],
            },
        )
        .unwrap();
        ps
    }

    #[test]
    fn frozen_params_are_bit_identical() {
        let mut ps = scalar(0.123456789);
        let id = ps.id("x").unwrap();
        ps.set_freeze_mask(&["*"]).unwrap();
        let mut opt = Adam::new(&ps, AdamConfig::default());
        for _ in 0..10 {
            ps.grad_mut(id)[0] = 3.0;
            assert_eq!(opt.step(&mut ps), StepStatus::Applied);
        }
        assert_eq!(ps.value(id)[0].to_bits(), 0.123456789f64.to_bits());
    }

    #[test]
    fn zero_gradient_leaves_scalar() {
        let mut ps = scalar(2.5);
        let id = ps.id("x").unwrap();
        let mut opt = Adam::new(&ps, AdamConfig::default());
        opt.step(&mut ps);
        assert_eq!(ps.value(id)[0], 2.5);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m = 0.1, v = 0.001; bias correction gives m_hat = 1, v_hat = 1,
        // so the update is lr / (1 + eps).
        let mut ps = scalar(0.0);
        let id = ps.id("x").unwrap();
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(&ps, cfg);
        ps.grad_mut(id)[0] = 1.0;
        opt.step(&mut ps);
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((ps.value(id)[0] - expected).abs() < 1e-15);
        assert_eq!(ps.grad(id)[0], 0.0, "gradients zeroed after step");
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut ps = scalar(1.0);
        let id = ps.id("x").unwrap();
        let mut opt = Adam::new(&ps, AdamConfig::default());
        ps.grad_mut(id)[0] = f64::NAN;
        assert_eq!(
            opt.step(&mut ps),
            StepStatus::Rejected { param: "x".into() }
        );
        assert_eq!(ps.value(id)[0], 1.0);
        assert_eq!(opt.step, 0);
        assert_eq!(ps.grad(id)[0], 0.0);
    }
}
