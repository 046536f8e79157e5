//! Flat parameter vectors, a small multilayer perceptron with hand-written
//! backward pass, and the optimizer step shared by every algorithm.

use std::ops::{Index, IndexMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat real-valued parameter vector. Gradients align with it index-for-index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Builds a vector, rejecting non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "parameter {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) {
        assert_eq!(self.len(), other.len(), "parameter length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "parameter length mismatch");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Layer sizes (input first, output last) and one activation per layer.
///
/// Parameters are laid out layer by layer as a row-major weight matrix
/// `[out][in]` followed by the bias vector `[out]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
}

impl MlpSpec {
    /// Hidden layers use `hidden_activation`; the output layer is linear.
    pub fn new(layer_sizes: Vec<usize>, hidden_activation: Activation) -> Result<Self> {
        let n_layers = layer_sizes.len().saturating_sub(1);
        let activations = (0..n_layers)
            .map(|l| {
                if l + 1 == n_layers {
                    Activation::Identity
                } else {
                    hidden_activation
                }
            })
            .collect();
        Self::with_activations(layer_sizes, activations)
    }

    pub fn with_activations(layer_sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(
                "an MLP needs an input size and at least one layer".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if activations.len() != layer_sizes.len() - 1 {
            return Err(Error::Config(format!(
                "{} activations given for {} layers",
                activations.len(),
                layer_sizes.len() - 1
            )));
        }
        Ok(Self {
            layer_sizes,
            activations,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn n_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Scaled uniform initialization: weights drawn from `U(-a, a)` with
    /// `a = gain * sqrt(3 / fan_in)`, biases zero. Hidden layers use gain 1;
    /// the output layer uses `output_gain`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, output_gain: f64) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let gain = if l + 1 == self.n_layers() {
                output_gain
            } else {
                1.0
            };
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                values.push(rng.random_range(-1.0..=1.0) * bound);
            }
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector(values)
    }

    fn check(&self, params: &[f64], input: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if input.len() != self.input_dim() {
            return Err(Error::Config(format!(
                "expected input of length {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }
}

/// Activations retained by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `layer_inputs[l]` feeds layer `l`; the last entry is the network output.
    layer_inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.layer_inputs.last().unwrap()
    }
}

pub fn mlp_forward_cached(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Result<ForwardCache> {
    spec.check(params, input)?;
    let mut layer_inputs = Vec::with_capacity(spec.n_layers() + 1);
    let mut pre_activations = Vec::with_capacity(spec.n_layers());
    layer_inputs.push(input.to_vec());
    let mut offset = 0;
    for l in 0..spec.n_layers() {
        let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let weights = &params[offset..offset + n_in * n_out];
        let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;
        let x = &layer_inputs[l];
        let z: Vec<f64> = (0..n_out)
            .map(|o| {
                let row = &weights[o * n_in..(o + 1) * n_in];
                bias[o] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
            })
            .collect();
        let act = spec.activations[l];
        let y = z.iter().map(|&v| act.apply(v)).collect();
        pre_activations.push(z);
        layer_inputs.push(y);
    }
    Ok(ForwardCache {
        layer_inputs,
        pre_activations,
    })
}

/// Network output for one input vector.
pub fn mlp_forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    let cache = mlp_forward_cached(spec, params.as_slice(), input)?;
    Ok(cache.layer_inputs.into_iter().last().unwrap())
}

/// Accumulates `d(output_grad . output) / d params` into `grad_out`.
pub fn mlp_backward_cached(
    spec: &MlpSpec,
    params: &[f64],
    cache: &ForwardCache,
    output_grad: &[f64],
    grad_out: &mut [f64],
) -> Result<()> {
    if output_grad.len() != spec.output_dim() {
        return Err(Error::Config(format!(
            "expected output gradient of length {}, got {}",
            spec.output_dim(),
            output_grad.len()
        )));
    }
    if grad_out.len() != spec.param_count() {
        return Err(Error::Config("gradient buffer has the wrong length".into()));
    }
    let mut offsets = Vec::with_capacity(spec.n_layers());
    let mut offset = 0;
    for w in spec.layer_sizes.windows(2) {
        offsets.push(offset);
        offset += w[0] * w[1] + w[1];
    }

    let mut upstream = output_grad.to_vec();
    for l in (0..spec.n_layers()).rev() {
        let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let act = spec.activations[l];
        let z = &cache.pre_activations[l];
        let y = &cache.layer_inputs[l + 1];
        let delta: Vec<f64> = (0..n_out)
            .map(|o| upstream[o] * act.derivative(z[o], y[o]))
            .collect();
        let x = &cache.layer_inputs[l];
        let off = offsets[l];
        for o in 0..n_out {
            let d = delta[o];
            if d != 0.0 {
                let row = &mut grad_out[off + o * n_in..off + (o + 1) * n_in];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
            grad_out[off + n_in * n_out + o] += d;
        }
        if l > 0 {
            let weights = &params[off..off + n_in * n_out];
            upstream = (0..n_in)
                .map(|i| (0..n_out).map(|o| weights[o * n_in + i] * delta[o]).sum())
                .collect();
        }
    }
    Ok(())
}

/// Gradient of `output_grad . mlp_forward(params, input)` with respect to `params`.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &ParamVector,
    input: &[f64],
    output_grad: &[f64],
) -> Result<ParamVector> {
    let cache = mlp_forward_cached(spec, params.as_slice(), input)?;
    let mut grad = vec![0.0; spec.param_count()];
    mlp_backward_cached(spec, params.as_slice(), &cache, output_grad, &mut grad)?;
    Ok(ParamVector(grad))
}

/// Rescales `grad` so its Euclidean norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grad: &mut ParamVector, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam moments plus the global-norm clip applied before every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: ParamVector,
    pub second_moment: ParamVector,
    pub step_count: u64,
    pub learning_rate: f64,
    pub clip_norm: f64,
}

impl OptimizerState {
    pub fn new(n_params: usize, learning_rate: f64, clip_norm: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip norm must be positive, got {clip_norm}"
            )));
        }
        Ok(Self {
            first_moment: ParamVector::zeros(n_params),
            second_moment: ParamVector::zeros(n_params),
            step_count: 0,
            learning_rate,
            clip_norm,
        })
    }

    /// One descent step on `params` along the loss gradient `grad`.
    ///
    /// The gradient is first clipped to `clip_norm` in global Euclidean norm.
    /// A non-finite gradient leaves both `params` and `self` untouched.
    pub fn apply(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        if grad.len() != params.len() || grad.len() != self.first_moment.len() {
            return Err(Error::Config(format!(
                "gradient length {} does not match parameters ({}) or optimizer ({})",
                grad.len(),
                params.len(),
                self.first_moment.len()
            )));
        }
        if !grad.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let mut g = grad.clone();
        clip_global_norm(&mut g, self.clip_norm);

        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        let m = self.first_moment.as_mut_slice();
        let v = self.second_moment.as_mut_slice();
        for (i, p) in params.as_mut_slice().iter_mut().enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
        Ok(())
    }
}

/// Central finite-difference gradient of `f` at `params`.
///
/// Used by tests and diagnostics as an independent oracle for the analytic
/// gradients in this crate.
pub fn finite_difference_gradient<F>(params: &ParamVector, step: f64, mut f: F) -> ParamVector
where
    F: FnMut(&ParamVector) -> f64,
{
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    ParamVector(grad)
}

/// Denominator floor for gradient checks. Central differences with step
/// `1e-6` carry roundoff near `1e-10`, so coordinates far below this floor
/// are compared in absolute terms.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-4;

/// Relative error `|a - b| / max(|a|, |b|, floor)` taken as the max over coordinates.
pub fn max_relative_error(a: &ParamVector, b: &ParamVector, floor: f64) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
