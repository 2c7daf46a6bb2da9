use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    sigmoid, ActionChunk, ActionNormalizer, FlowBatch, ModelError, ObservationContext, BCE_EPS,
};
use crate::diffcore::{
    Activation, Adam, Checkpoint, Mlp, MlpCache, MlpSpec, ParamSet, RngState,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub context_dim: usize,
    pub feature_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub expert_hidden: Vec<usize>,
    pub flow_hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub hidden_activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl PolicyConfig {
    pub fn new(obs_dim: usize) -> Self {
        Self {
            obs_dim,
            horizon: 8,
            action_dim: 6,
            context_dim: 64,
            feature_dim: 64,
            encoder_hidden: vec![64, 64],
            expert_hidden: vec![64, 64],
            flow_hidden: vec![],
            hidden_activation: Activation::Tanh,
        }
    }

    /// Tiny network for numerical checks.
    pub fn tiny(obs_dim: usize, horizon: usize, action_dim: usize, width: usize) -> Self {
        Self {
            obs_dim,
            horizon,
            action_dim,
            context_dim: width,
            feature_dim: width,
            encoder_hidden: vec![width],
            expert_hidden: vec![width],
            flow_hidden: vec![],
            hidden_activation: Activation::Tanh,
        }
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    fn spec(&self, input: usize, hidden: &[usize], output: usize) -> MlpSpec {
        let mut w = vec![input];
        w.extend_from_slice(hidden);
        w.push(output);
        let mut spec = MlpSpec::tanh(&w);
        spec.activations = vec![self.hidden_activation; hidden.len()];
        spec
    }

    /// Architecture of the four stages, keyed by parameter prefix.
    pub fn module_specs(&self) -> BTreeMap<String, MlpSpec> {
        let enc = self.spec(self.obs_dim, &self.encoder_hidden, self.context_dim);
        let exp = self
            .spec(self.context_dim + self.chunk_len() + 1, &self.expert_hidden, self.feature_dim)
            .with_output(Activation::Tanh);
        let flow = self.spec(self.feature_dim, &self.flow_hidden, self.chunk_len());
        let comp = MlpSpec::tanh(&[self.feature_dim, 1]);
        BTreeMap::from([
            ("encoder".to_string(), enc),
            ("expert".to_string(), exp),
            ("flow_head".to_string(), flow),
            ("completion_head".to_string(), comp),
        ])
    }
}

/// Weights on the two loss terms; a zero weight skips that head's backward
/// pass entirely, so its contribution to every gradient is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub action: f64,
    pub completion: f64,
}

impl LossWeights {
    pub fn total(lambda: f64) -> Self {
        Self {
            action: 1.0,
            completion: lambda,
        }
    }

    pub fn action_only() -> Self {
        Self {
            action: 1.0,
            completion: 0.0,
        }
    }

    pub fn completion_only() -> Self {
        Self {
            action: 0.0,
            completion: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub action: f64,
    pub completion: f64,
    pub total: f64,
}

/// Result of one shared forward pass for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedOutput {
    pub features: Vec<f64>,
    pub velocity: Vec<f64>,
    pub p: f64,
}

struct Pass {
    encoder: MlpCache,
    expert: MlpCache,
    flow: MlpCache,
    completion: MlpCache,
}

fn check_finite(a: &Array2<f64>, stage: &'static str) -> Result<(), ModelError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { stage })
    }
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub config: PolicyConfig,
    pub params: ParamSet,
    pub normalizer: ActionNormalizer,
    encoder: Mlp,
    expert: Mlp,
    flow_head: Mlp,
    completion_head: Mlp,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(
        config: PolicyConfig,
        normalizer: ActionNormalizer,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if normalizer.dim() != config.action_dim {
            return Err(ModelError::LengthMismatch {
                what: "normalizer",
                expected: config.action_dim,
                got: normalizer.dim(),
            });
        }
        let mut specs = config.module_specs();
        let mut params = ParamSet::new();
        let mut take = |name: &str, params: &mut ParamSet, rng: &mut R| {
            Mlp::register(params, name, specs.remove(name).unwrap(), rng)
        };
        let encoder = take("encoder", &mut params, rng)?;
        let expert = take("expert", &mut params, rng)?;
        let flow_head = take("flow_head", &mut params, rng)?;
        let completion_head = take("completion_head", &mut params, rng)?;
        Ok(Self {
            config,
            params,
            normalizer,
            encoder,
            expert,
            flow_head,
            completion_head,
        })
    }

    pub fn module_specs(&self) -> BTreeMap<String, MlpSpec> {
        self.config.module_specs()
    }

    pub fn completion_weight_ids(&self) -> (crate::diffcore::ParamId, crate::diffcore::ParamId) {
        self.completion_head.layer_params()[0]
    }

    /// Sets the completion head to `W = 0`, `b = bias`.
    pub fn set_completion_head(&mut self, bias: f64) {
        let (w, b) = self.completion_weight_ids();
        self.params.value_mut(w).iter_mut().for_each(|v| *v = 0.0);
        self.params.value_mut(b)[0] = bias;
    }

    fn expert_input(&self, z: &Array2<f64>, a_tau: &Array2<f64>, taus: &[f64]) -> Array2<f64> {
        let tau_col = Array2::from_shape_vec((taus.len(), 1), taus.to_vec()).unwrap();
        concatenate(Axis(1), &[z.view(), a_tau.view(), tau_col.view()]).unwrap()
    }

    fn check_batch_dims(&self, contexts: &Array2<f64>, chunks: &Array2<f64>) -> Result<(), ModelError> {
        if contexts.ncols() != self.config.obs_dim {
            return Err(ModelError::LengthMismatch {
                what: "observation context",
                expected: self.config.obs_dim,
                got: contexts.ncols(),
            });
        }
        if chunks.ncols() != self.config.chunk_len() {
            return Err(ModelError::LengthMismatch {
                what: "action chunk",
                expected: self.config.chunk_len(),
                got: chunks.ncols(),
            });
        }
        Ok(())
    }

    fn encode(&self, contexts: Array2<f64>) -> Result<MlpCache, ModelError> {
        let enc = self.encoder.forward(&self.params, contexts)?;
        check_finite(enc.output(), "encoder")?;
        Ok(enc)
    }

    /// Expert plus both heads on precomputed context embeddings.
    fn trunk(
        &self,
        z: &Array2<f64>,
        a_tau: &Array2<f64>,
        taus: &[f64],
    ) -> Result<(MlpCache, MlpCache, MlpCache), ModelError> {
        let expert = self.expert.forward(&self.params, self.expert_input(z, a_tau, taus))?;
        check_finite(expert.output(), "expert")?;
        let features = expert.output().clone();
        let flow = self.flow_head.forward(&self.params, features.clone())?;
        check_finite(flow.output(), "flow_head")?;
        let completion = self.completion_head.forward(&self.params, features)?;
        check_finite(completion.output(), "completion_head")?;
        Ok((expert, flow, completion))
    }

    fn pass(&self, contexts: Array2<f64>, a_tau: &Array2<f64>, taus: &[f64]) -> Result<Pass, ModelError> {
        self.check_batch_dims(&contexts, a_tau)?;
        let encoder = self.encode(contexts)?;
        let (expert, flow, completion) = self.trunk(encoder.output(), a_tau, taus)?;
        Ok(Pass {
            encoder,
            expert,
            flow,
            completion,
        })
    }

    /// One forward pass: features `F`, velocity `v_hat = flow(F)` and
    /// `p = sigmoid(W F + b)`.
    pub fn forward_shared(
        &self,
        z: &ObservationContext,
        a_tau: &[f64],
        tau: f64,
    ) -> Result<SharedOutput, ModelError> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(ModelError::TauOutOfRange(tau));
        }
        let ctx = Array2::from_shape_vec((1, z.dim()), z.to_vec()).unwrap();
        let a = Array2::from_shape_vec((1, a_tau.len()), a_tau.to_vec()).unwrap();
        let pass = self.pass(ctx, &a, &[tau])?;
        Ok(SharedOutput {
            features: pass.expert.output().row(0).to_vec(),
            velocity: pass.flow.output().row(0).to_vec(),
            p: sigmoid(pass.completion.output()[[0, 0]]),
        })
    }

    /// Weighted loss over `batch` with gradients accumulated into `params`.
    pub fn loss_and_grad(
        &mut self,
        batch: &FlowBatch,
        weights: LossWeights,
    ) -> Result<LossBreakdown, ModelError> {
        self.loss_and_grad_observed(batch, weights, |_, _| {})
    }

    /// As [`Self::loss_and_grad`]; `observe` receives the feature matrices fed
    /// to the flow head and to the completion head.
    pub fn loss_and_grad_observed<F>(
        &mut self,
        batch: &FlowBatch,
        weights: LossWeights,
        mut observe: F,
    ) -> Result<LossBreakdown, ModelError>
    where
        F: FnMut(&Array2<f64>, &Array2<f64>),
    {
        if weights.action < 0.0 || weights.completion < 0.0 {
            return Err(ModelError::InvalidBatch("loss weights must be non-negative".into()));
        }
        let (loss, pass) = self.evaluate(batch)?;
        observe(pass.flow.input(), pass.completion.input());
        let b = batch.len() as f64;
        let total = weights.action * loss.action + weights.completion * loss.completion;

        let mut d_features = Array2::<f64>::zeros(pass.expert.output().dim());
        if weights.action > 0.0 {
            let target = &batch.targets - &batch.noise;
            let d_v = (pass.flow.output() - &target) * (2.0 * weights.action / b);
            d_features += &self.flow_head.backward(&mut self.params, &pass.flow, d_v)?;
        }
        if weights.completion > 0.0 {
            let logits = pass.completion.output();
            let d_logit = Array2::from_shape_fn((batch.len(), 1), |(i, _)| {
                let p = sigmoid(logits[[i, 0]]);
                if (BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                    weights.completion * (p - batch.labels[i]) / b
                } else {
                    0.0
                }
            });
            d_features += &self.completion_head.backward(&mut self.params, &pass.completion, d_logit)?;
        }
        let encoder_live = self.encoder.any_trainable(&self.params);
        if self.expert.any_trainable(&self.params) || encoder_live {
            let d_in = self.expert.backward(&mut self.params, &pass.expert, d_features)?;
            if encoder_live {
                let d_z = d_in.slice(s![.., ..self.config.context_dim]).to_owned();
                self.encoder.backward(&mut self.params, &pass.encoder, d_z)?;
            }
        }
        Ok(LossBreakdown {
            action: loss.action,
            completion: loss.completion,
            total,
        })
    }

    /// Both loss terms without touching gradients.
    pub fn losses(&self, batch: &FlowBatch) -> Result<LossBreakdown, ModelError> {
        Ok(self.evaluate(batch)?.0)
    }

    fn evaluate(&self, batch: &FlowBatch) -> Result<(LossBreakdown, Pass), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let a_tau = Array2::from_shape_fn(batch.targets.dim(), |(i, j)| {
            let t = batch.taus[i];
            (1.0 - t) * batch.noise[[i, j]] + t * batch.targets[[i, j]]
        });
        let pass = self.pass(batch.contexts.clone(), &a_tau, &batch.taus)?;
        let b = batch.len() as f64;
        let target = &batch.targets - &batch.noise;
        let diff = pass.flow.output() - &target;
        let action = diff.iter().map(|d| d * d).sum::<f64>() / b;
        let completion = pass
            .completion
            .output()
            .column(0)
            .iter()
            .zip(&batch.labels)
            .map(|(&l, &y)| super::completion_loss(sigmoid(l), y))
            .sum::<f64>()
            / b;
        Ok((
            LossBreakdown {
                action,
                completion,
                total: action + completion,
            },
            pass,
        ))
    }

    /// Euler-integrates the velocity field for each row of `contexts`,
    /// starting from standard-normal noise. Returns normalized chunks and the
    /// completion probabilities read at `tau = 1` on the final chunks.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        contexts: Array2<f64>,
        steps: usize,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Vec<f64>), ModelError> {
        if steps == 0 {
            return Err(ModelError::NoSteps);
        }
        let n = contexts.nrows();
        let mut a = Array2::from_shape_fn((n, self.config.chunk_len()), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        self.check_batch_dims(&contexts, &a)?;
        let enc = self.encode(contexts)?;
        let z = enc.output();
        let dt = 1.0 / steps as f64;
        for k in 0..steps {
            let taus = vec![k as f64 * dt; n];
            let expert = self.expert.forward(&self.params, self.expert_input(z, &a, &taus))?;
            check_finite(expert.output(), "expert")?;
            let flow = self.flow_head.forward(&self.params, expert.output().clone())?;
            a.scaled_add(dt, flow.output());
            check_finite(&a, "integration")?;
        }
        let (_, _, completion) = self.trunk(z, &a, &vec![1.0; n])?;
        let p = completion.output().column(0).iter().map(|&l| sigmoid(l)).collect();
        Ok((a, p))
    }

    /// Samples one chunk in simulator units plus the completion probability.
    pub fn sample_action_chunk<R: Rng + ?Sized>(
        &self,
        z: &ObservationContext,
        steps: usize,
        rng: &mut R,
    ) -> Result<(ActionChunk, f64), ModelError> {
        let (chunk, p) = self.sample_normalized(z, steps, rng)?;
        let mut data = chunk.data;
        self.normalizer.denormalize(&mut data);
        Ok((ActionChunk::new(data, self.config.horizon, self.config.action_dim)?, p))
    }

    /// Samples one chunk in the model's normalized action space.
    pub fn sample_normalized<R: Rng + ?Sized>(
        &self,
        z: &ObservationContext,
        steps: usize,
        rng: &mut R,
    ) -> Result<(ActionChunk, f64), ModelError> {
        let ctx = Array2::from_shape_vec((1, z.dim()), z.to_vec()).unwrap();
        let (a, p) = self.sample_batch(ctx, steps, rng)?;
        Ok((
            ActionChunk::new(a.row(0).to_vec(), self.config.horizon, self.config.action_dim)?,
            p[0],
        ))
    }

    /// Checkpoint of the current weights; the config and normalizer travel
    /// in `metadata.policy`.
    pub fn checkpoint(
        &self,
        optimizer: Option<&Adam>,
        rng_state: RngState,
        mut metadata: serde_json::Value,
    ) -> Checkpoint {
        if !metadata.is_object() {
            metadata = serde_json::json!({});
        }
        metadata["policy"] = serde_json::json!({
            "config": self.config,
            "normalizer": self.normalizer,
        });
        Checkpoint::capture(&self.params, self.module_specs(), optimizer, rng_state, metadata)
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<(), ModelError> {
        Ok(self
            .checkpoint(None, RngState { seed: 0, draws: 0 }, metadata)
            .save(path)?)
    }

    /// Rebuilds a network from a checkpoint written by [`Self::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let policy = &ckpt.metadata["policy"];
        let parse = |v: &serde_json::Value, what: &str| {
            crate::diffcore::DiffError::CheckpointMismatch {
                field: format!("metadata.policy.{what}"),
                detail: format!("missing or malformed: {v}"),
            }
        };
        let config: PolicyConfig = serde_json::from_value(policy["config"].clone())
            .map_err(|_| parse(&policy["config"], "config"))?;
        let normalizer: ActionNormalizer = serde_json::from_value(policy["normalizer"].clone())
            .map_err(|_| parse(&policy["normalizer"], "normalizer"))?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Self::new(config, normalizer, &mut rng)?;
        let specs = net.module_specs();
        ckpt.restore_into(&mut net.params, &specs)?;
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&crate::diffcore::load_checkpoint(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net(seed: u64) -> PolicyNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyNet::new(PolicyConfig::tiny(5, 2, 3, 8), ActionNormalizer::identity(3), &mut rng).unwrap()
    }

    fn batch(net: &PolicyNet, n: usize, seed: u64) -> FlowBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Array2::from_shape_fn((n, net.config.obs_dim), |_| rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((n, net.config.chunk_len()), |_| rng.random_range(-1.0..1.0));
        let labels = (0..n).map(|i| (i % 2) as f64).collect();
        FlowBatch::sample(c, t, labels, &mut rng).unwrap()
    }

    fn zero_module(net: &mut PolicyNet, prefix: &str) {
        let ids: Vec<_> = net.params.ids().filter(|&id| net.params.name(id).starts_with(prefix)).collect();
        for id in ids {
            net.params.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn completion_head_constants() {
        let mut net = tiny_net(3);
        let z = ObservationContext::new(vec![0.3; 4], 0, 1).unwrap();
        net.set_completion_head(0.0);
        assert_eq!(net.forward_shared(&z, &[0.1; 6], 0.4).unwrap().p, 0.5);
        net.set_completion_head(3f64.ln());
        assert!((net.forward_shared(&z, &[0.1; 6], 0.4).unwrap().p - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_flow_head_gives_mean_squared_norm() {
        let mut net = tiny_net(4);
        zero_module(&mut net, "flow_head");
        let b = batch(&net, 6, 9);
        let expected = (&b.targets - &b.noise).iter().map(|d| d * d).sum::<f64>() / 6.0;
        assert!((net.losses(&b).unwrap().action - expected).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_equals_flow_loss() {
        let mut net = tiny_net(5);
        let b = batch(&net, 4, 1);
        let l = net.loss_and_grad(&b, LossWeights::total(0.0)).unwrap();
        assert_eq!(l.total, l.action);
    }

    #[test]
    fn shared_features_feed_both_heads() {
        let mut net = tiny_net(6);
        let b = batch(&net, 4, 2);
        let mut same = false;
        net.loss_and_grad_observed(&b, LossWeights::total(0.1), |f, c| same = f == c)
            .unwrap();
        assert!(same);
    }

    #[test]
    fn euler_on_constant_field_telescopes() {
        let mut net = tiny_net(7);
        zero_module(&mut net, "flow_head");
        let (_, bias) = net.flow_head.layer_params()[0];
        let c = [0.5, -1.0, 2.0, 0.0, 0.25, 1.5];
        net.params.value_mut(bias).copy_from_slice(&c);
        let z = ObservationContext::new(vec![0.1; 4], 0, 1).unwrap();
        for steps in [1, 3, 10] {
            let mut r1 = ChaCha8Rng::seed_from_u64(11);
            let mut r2 = ChaCha8Rng::seed_from_u64(11);
            let a0: Vec<f64> = (0..6).map(|_| r2.sample::<f64, _>(StandardNormal)).collect();
            let (chunk, p) = net.sample_normalized(&z, steps, &mut r1).unwrap();
            for k in 0..6 {
                assert!((chunk.data[k] - (a0[k] + c[k])).abs() < 1e-12);
            }
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn single_step_matches_one_velocity_evaluation() {
        let net = tiny_net(8);
        let z = ObservationContext::new(vec![0.2, -0.4, 0.9, 0.0], 0, 1).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a0: Vec<f64> = (0..6).map(|_| r2.sample::<f64, _>(StandardNormal)).collect();
        let v = net.forward_shared(&z, &a0, 0.0).unwrap().velocity;
        let (chunk, _) = net.sample_normalized(&z, 1, &mut r1).unwrap();
        for k in 0..6 {
            assert!((chunk.data[k] - (a0[k] + v[k])).abs() < 1e-12);
        }
        assert_eq!(net.sample_normalized(&z, 0, &mut r1).unwrap_err(), ModelError::NoSteps);
    }

    #[test]
    fn dimension_errors_are_reported() {
        let net = tiny_net(9);
        let z = ObservationContext::new(vec![0.0; 3], 0, 1).unwrap();
        assert!(matches!(
            net.forward_shared(&z, &[0.0; 6], 0.5),
            Err(ModelError::LengthMismatch { what: "observation context", .. })
        ));
    }

    #[test]
    fn checkpoint_rebuilds_identical_network() {
        let net = tiny_net(10);
        let ckpt = Checkpoint::from_json(&net.checkpoint(None, RngState { seed: 1, draws: 0 }, serde_json::Value::Null).to_json()).unwrap();
        let back = PolicyNet::from_checkpoint(&ckpt).unwrap();
        for id in net.params.ids() {
            assert_eq!(net.params.value(id), back.params.value(id));
        }
    }

    #[test]
    fn total_loss_gradient_matches_central_differences() {
        let mut net = tiny_net(12);
        let b = batch(&net, 4, 3);
        let w = LossWeights::total(0.1);
        net.params.zero_grad();
        net.loss_and_grad(&b, w).unwrap();
        let ids: Vec<_> = net.params.ids().collect();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for id in ids {
            for k in 0..net.params.value(id).len() {
                let analytic = net.params.grad(id)[k];
                let orig = net.params.value(id)[k];
                net.params.value_mut(id)[k] = orig + h;
                let up = net.losses(&b).unwrap();
                net.params.value_mut(id)[k] = orig - h;
                let down = net.losses(&b).unwrap();
                net.params.value_mut(id)[k] = orig;
                let f = |l: LossBreakdown| l.action + 0.1 * l.completion;
                let numeric = (f(up) - f(down)) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }
}
