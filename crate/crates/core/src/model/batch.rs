use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::simenv::{SimConstants, ACTION_DIM};

/// Affine map between simulator action units and the unit-scale space the
/// flow model works in: `raw = norm * scale + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionNormalizer {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl ActionNormalizer {
    /// Velocities scale by the per-step limit; grips map {0, 1} to {-1, 1}.
    pub fn for_sim(c: &SimConstants) -> Self {
        let mut scale = Vec::with_capacity(ACTION_DIM);
        let mut offset = Vec::with_capacity(ACTION_DIM);
        for _ in 0..2 {
            scale.extend_from_slice(&[c.max_step, c.max_step, 0.5]);
            offset.extend_from_slice(&[0.0, 0.0, 0.5]);
        }
        Self { scale, offset }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            scale: vec![1.0; dim],
            offset: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    /// Normalizes a flattened chunk in place (coordinates cycle per action).
    pub fn normalize(&self, chunk: &mut [f64]) {
        let d = self.dim();
        for (i, v) in chunk.iter_mut().enumerate() {
            *v = (*v - self.offset[i % d]) / self.scale[i % d];
        }
    }

    pub fn denormalize(&self, chunk: &mut [f64]) {
        let d = self.dim();
        for (i, v) in chunk.iter_mut().enumerate() {
            *v = *v * self.scale[i % d] + self.offset[i % d];
        }
    }
}

/// A minibatch for flow matching: contexts, clean chunks `a1`, completion
/// labels, and the per-sample draws `a0 ~ N(0, I)` and `tau ~ U[0, 1]`.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub contexts: Array2<f64>,
    pub targets: Array2<f64>,
    pub labels: Vec<f64>,
    pub noise: Array2<f64>,
    pub taus: Vec<f64>,
}

impl FlowBatch {
    pub fn sample<R: Rng + ?Sized>(
        contexts: Array2<f64>,
        targets: Array2<f64>,
        labels: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let (b, d) = targets.dim();
        let noise = Array2::from_shape_fn((b, d), |_| rng.sample::<f64, _>(StandardNormal));
        let taus = (0..b).map(|_| rng.random::<f64>()).collect();
        Self::with_draws(contexts, targets, labels, noise, taus)
    }

    pub fn with_draws(
        contexts: Array2<f64>,
        targets: Array2<f64>,
        labels: Vec<f64>,
        noise: Array2<f64>,
        taus: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let b = contexts.nrows();
        if b == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if targets.nrows() != b || labels.len() != b || taus.len() != b || noise.nrows() != b {
            return Err(ModelError::InvalidBatch("row counts differ".into()));
        }
        if noise.dim() != targets.dim() {
            return Err(ModelError::InvalidBatch("noise and target shapes differ".into()));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(ModelError::InvalidBatch("labels must be 0 or 1".into()));
        }
        if let Some(&t) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(ModelError::TauOutOfRange(t));
        }
        Ok(Self {
            contexts,
            targets,
            labels,
            noise,
            taus,
        })
    }

    pub fn len(&self) -> usize {
        self.contexts.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_round_trip() {
        let n = ActionNormalizer::for_sim(&SimConstants::default());
        let raw = vec![0.05, -0.025, 1.0, 0.0, 0.01, 0.0, 0.05, 0.05, 0.0, -0.05, 0.0, 1.0];
        let mut v = raw.clone();
        n.normalize(&mut v);
        for (a, b) in v[..6].iter().zip([1.0, -0.5, 1.0, 0.0, 0.2, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        n.denormalize(&mut v);
        for (a, b) in v.iter().zip(&raw) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_validation() {
        let c = Array2::zeros((2, 3));
        let t = Array2::zeros((2, 4));
        assert!(FlowBatch::with_draws(c.clone(), t.clone(), vec![0.0, 1.0], t.clone(), vec![0.0, 1.0]).is_ok());
        assert!(FlowBatch::with_draws(c.clone(), t.clone(), vec![0.0, 0.5], t.clone(), vec![0.0, 1.0]).is_err());
        assert!(matches!(
            FlowBatch::with_draws(c.clone(), t.clone(), vec![0.0, 1.0], t.clone(), vec![0.0, 1.2]),
            Err(ModelError::TauOutOfRange(_))
        ));
        assert_eq!(
            FlowBatch::with_draws(Array2::zeros((0, 3)), Array2::zeros((0, 4)), vec![], Array2::zeros((0, 4)), vec![])
                .unwrap_err(),
            ModelError::EmptyBatch
        );
    }

    #[test]
    fn sampled_draws_are_in_range() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let b = FlowBatch::sample(Array2::zeros((500, 2)), Array2::zeros((500, 3)), vec![1.0; 500], &mut rng).unwrap();
        assert!(b.taus.iter().all(|t| (0.0..=1.0).contains(t)));
        let mean: f64 = b.noise.iter().sum::<f64>() / 1500.0;
        let var: f64 = b.noise.iter().map(|x| x * x).sum::<f64>() / 1500.0;
        assert!(mean.abs() < 0.1 && (var - 1.0).abs() < 0.15);
    }
}
