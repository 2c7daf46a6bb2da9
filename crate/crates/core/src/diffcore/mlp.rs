use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DiffError, ParamId, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the activation output.
    fn backprop(self, output: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Tanh => grad.zip_mut_with(output, |g, &y| *g *= 1.0 - y * y),
            Activation::Relu => grad.zip_mut_with(output, |g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Identity => {}
        }
    }
}

/// Layer widths including the input width, so `widths.len() - 1` affine maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    /// One entry per hidden layer (`widths.len() - 2`).
    pub activations: Vec<Activation>,
    pub output_activation: Activation,
}

impl MlpSpec {
    /// Tanh hidden layers, identity output.
    pub fn tanh(widths: &[usize]) -> Self {
        let hidden = widths.len().saturating_sub(2);
        Self {
            widths: widths.to_vec(),
            activations: vec![Activation::Tanh; hidden],
            output_activation: Activation::Identity,
        }
    }

    pub fn with_output(mut self, act: Activation) -> Self {
        self.output_activation = act;
        self
    }

    pub fn validate(&self) -> Result<(), DiffError> {
        if self.widths.len() < 2 {
            return Err(DiffError::InvalidSpec(
                "need an input width and at least one layer".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(DiffError::InvalidSpec("widths must be positive".into()));
        }
        if self.activations.len() != self.widths.len() - 2 {
            return Err(DiffError::InvalidSpec(format!(
                "{} hidden layers but {} activations",
                self.widths.len() - 2,
                self.activations.len()
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers() {
            self.output_activation
        } else {
            self.activations[layer]
        }
    }
}

/// An MLP bound to parameters registered under `prefix.l{i}.{weight,bias}`.
///
/// Weights are stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Mlp {
    prefix: String,
    spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
}

/// Per-layer outputs of a forward pass; `activations[0]` is the input.
#[derive(Debug, Clone)]
pub struct MlpCache {
    owner: String,
    activations: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn input(&self) -> &Array2<f64> {
        &self.activations[0]
    }

    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().unwrap()
    }
}

impl Mlp {
    /// Registers freshly initialised parameters: weights uniform in
    /// ±sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        spec: MlpSpec,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers());
        for l in 0..spec.layers() {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            let wid = params.register(
                &format!("{prefix}.l{l}.weight"),
                Tensor {
                    shape: vec![fan_out, fan_in],
                    data: w,
                },
            )?;
            let bid = params.register(&format!("{prefix}.l{l}.bias"), Tensor::zeros(&[fan_out]))?;
            layers.push((wid, bid));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            spec,
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn layer_params(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// True if any parameter of this network is trainable.
    pub fn any_trainable(&self, params: &ParamSet) -> bool {
        self.layers
            .iter()
            .any(|&(w, b)| params.is_trainable(w) || params.is_trainable(b))
    }

    fn layer_name(&self, l: usize) -> String {
        format!("{}.l{}", self.prefix, l)
    }

    /// Batched forward pass; rows of `input` are samples.
    pub fn forward(&self, params: &ParamSet, input: Array2<f64>) -> Result<MlpCache, DiffError> {
        if input.ncols() != self.spec.input_width() {
            return Err(DiffError::DimensionMismatch {
                layer: self.layer_name(0),
                expected: self.spec.input_width(),
                got: input.ncols(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input);
        for (l, &(wid, bid)) in self.layers.iter().enumerate() {
            let w = weight_view(params, wid);
            let b = params.value(bid);
            let x = activations.last().unwrap();
            let mut z = Array2::<f64>::zeros((x.nrows(), w.nrows()));
            general_mat_mul(1.0, x, &w.t(), 0.0, &mut z);
            for mut row in z.rows_mut() {
                row.iter_mut().zip(b).for_each(|(v, bias)| *v += bias);
            }
            self.spec.activation(l).apply(&mut z);
            activations.push(z);
        }
        Ok(MlpCache {
            owner: self.prefix.clone(),
            activations,
        })
    }

    /// Accumulates parameter gradients for `upstream` (d loss / d output) and
    /// returns d loss / d input.
    pub fn backward(
        &self,
        params: &mut ParamSet,
        cache: &MlpCache,
        upstream: Array2<f64>,
    ) -> Result<Array2<f64>, DiffError> {
        if cache.owner != self.prefix || cache.activations.len() != self.layers.len() + 1 {
            return Err(DiffError::CacheMismatch(self.prefix.clone()));
        }
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(DiffError::DimensionMismatch {
                layer: self.layer_name(self.layers.len() - 1),
                expected: out.ncols(),
                got: upstream.ncols(),
            });
        }
        let mut grad = upstream;
        for l in (0..self.layers.len()).rev() {
            let (wid, bid) = self.layers[l];
            self.spec
                .activation(l)
                .backprop(&cache.activations[l + 1], &mut grad);
            let x = &cache.activations[l];
            {
                let (fan_out, fan_in) = (self.spec.widths[l + 1], self.spec.widths[l]);
                let gw = params.grad_mut(wid);
                let mut gw = ArrayViewMut2::from_shape((fan_out, fan_in), gw).unwrap();
                general_mat_mul(1.0, &grad.t(), x, 1.0, &mut gw);
            }
            {
                let gb = params.grad_mut(bid);
                let col_sums = grad.sum_axis(Axis(0));
                gb.iter_mut().zip(col_sums.iter()).for_each(|(g, s)| *g += s);
            }
            let w = weight_view(params, wid);
            let mut dx = Array2::<f64>::zeros((grad.nrows(), w.ncols()));
            general_mat_mul(1.0, &grad, &w, 0.0, &mut dx);
            grad = dx;
        }
        Ok(grad)
    }
}

fn weight_view(params: &ParamSet, id: ParamId) -> ArrayView2<'_, f64> {
    let shape = params.shape(id);
    ArrayView2::from_shape((shape[0], shape[1]), params.value(id)).unwrap()
}

/// Single-sample forward pass.
pub fn mlp_forward(
    mlp: &Mlp,
    params: &ParamSet,
    input: &[f64],
) -> Result<(Vec<f64>, MlpCache), DiffError> {
    let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).unwrap();
    let cache = mlp.forward(params, x)?;
    let out = cache.output().row(0).to_vec();
    Ok((out, cache))
}

/// Single-sample backward pass; see [`Mlp::backward`].
pub fn mlp_backward(
    mlp: &Mlp,
    cache: &MlpCache,
    upstream: &[f64],
    params: &mut ParamSet,
) -> Result<Vec<f64>, DiffError> {
    let g = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).unwrap();
    Ok(mlp.backward(params, cache, g)?.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(widths: &[usize], seed: u64) -> (ParamSet, Mlp) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mlp = Mlp::register(&mut ps, "net", MlpSpec::tanh(widths), &mut rng).unwrap();
        (ps, mlp)
    }

    /// Straightforward scalar re-evaluation of the same arithmetic.
    fn reference_forward(mlp: &Mlp, ps: &ParamSet, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        for (l, &(wid, bid)) in mlp.layer_params().iter().enumerate() {
            let (rows, cols) = (ps.shape(wid)[0], ps.shape(wid)[1]);
            let w = ps.value(wid);
            let b = ps.value(bid);
            let mut y = vec![0.0; rows];
            for r in 0..rows {
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += w[r * cols + c] * x[c];
                }
                y[r] = acc + b[r];
            }
            if l + 1 < mlp.layer_params().len() {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            x = y;
        }
        x
    }

    #[test]
    fn zero_weights_give_bias() {
        let (mut ps, mlp) = net(&[3, 4, 2], 1);
        for id in ps.ids().collect::<Vec<_>>() {
            ps.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let (_, out_b) = mlp.layer_params()[1];
        ps.value_mut(out_b).copy_from_slice(&[0.25, -1.5]);
        let (out, _) = mlp_forward(&mlp, &ps, &[7.0, -3.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.25, -1.5]);
    }

    #[test]
    fn identity_layer() {
        let (mut ps, mlp) = net(&[3, 3], 2);
        let (w, b) = mlp.layer_params()[0];
        ps.value_mut(w)
            .copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        ps.value_mut(b).iter_mut().for_each(|v| *v = 0.0);
        let x = [0.3, -2.0, 5.5];
        assert_eq!(mlp_forward(&mlp, &ps, &x).unwrap().0, x.to_vec());
    }

    #[test]
    fn matches_reference_forward() {
        let (ps, mlp) = net(&[5, 7, 6, 3], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = mlp_forward(&mlp, &ps, &x).unwrap().0;
            let want = reference_forward(&mlp, &ps, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-14 * w.abs().max(1.0), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let (ps, mlp) = net(&[4, 3], 4);
        let err = mlp_forward(&mlp, &ps, &[1.0, 2.0]).unwrap_err();
        assert_eq!(
            err,
            DiffError::DimensionMismatch {
                layer: "net.l0".into(),
                expected: 4,
                got: 2
            }
        );
    }

    #[test]
    fn foreign_cache_rejected() {
        let (mut ps, mlp) = net(&[2, 2], 5);
        let mut other_ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let other = Mlp::register(&mut other_ps, "other", MlpSpec::tanh(&[2, 2]), &mut rng).unwrap();
        let (_, cache) = mlp_forward(&other, &other_ps, &[1.0, 1.0]).unwrap();
        assert_eq!(
            mlp_backward(&mlp, &cache, &[1.0, 1.0], &mut ps).unwrap_err(),
            DiffError::CacheMismatch("net".into())
        );
    }

    #[test]
    fn zero_upstream_leaves_grads() {
        let (mut ps, mlp) = net(&[3, 4, 2], 6);
        let (_, cache) = mlp_forward(&mlp, &ps, &[0.1, 0.2, 0.3]).unwrap();
        mlp_backward(&mlp, &cache, &[0.0, 0.0], &mut ps).unwrap();
        assert!(ps.ids().all(|id| ps.grad(id).iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn linear_layer_analytic_grads() {
        let (mut ps, mlp) = net(&[3, 2], 7);
        let (w, b) = mlp.layer_params()[0];
        let wv = ps.value(w).to_vec();
        let x = [1.0, -2.0, 0.5];
        let g = [0.3, -0.7];
        let (_, cache) = mlp_forward(&mlp, &ps, &x).unwrap();
        let dx = mlp_backward(&mlp, &cache, &g, &mut ps).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((ps.grad(w)[r * 3 + c] - g[r] * x[c]).abs() < 1e-15);
            }
        }
        assert_eq!(ps.grad(b), &g);
        for c in 0..3 {
            let want = wv[c] * g[0] + wv[3 + c] * g[1];
            assert!((dx[c] - want).abs() < 1e-15);
        }
        // accumulation, not overwrite
        mlp_backward(&mlp, &cache, &g, &mut ps).unwrap();
        assert!((ps.grad(b)[0] - 2.0 * g[0]).abs() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::tanh(&[3]).validate().is_err());
        assert!(MlpSpec::tanh(&[3, 0, 2]).validate().is_err());
        let mut s = MlpSpec::tanh(&[3, 4, 2]);
        s.activations.clear();
        assert!(s.validate().is_err());
    }
}
