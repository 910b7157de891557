//! Feedforward network emitting MHE weights, the tracking loss, and the
//! Adam optimizer used to train it.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mhe::{theta, AugmentedState, MheWeights, StateMatrix, StateVector, GAMMA_FLOOR, THETA_DIM, WEIGHT_FLOOR};
use crate::seed;

pub const FEATURE_DIM: usize = 6;
pub const LAYER_SIZES: [usize; 4] = [FEATURE_DIM, 30, 30, THETA_DIM];
pub const PARAM_COUNT: usize = 6 * 30 + 30 + 30 * 30 + 30 + 30 * 25 + 25;

pub type Features = [f64; FEATURE_DIM];
pub type RawOutput = [f64; THETA_DIM];

/// Positivity map from raw network outputs to MHE weights:
/// `θ_i = softplus(z_i) + ε` for the diagonals and
/// `γ = ε_γ + (1 − ε_γ)·sigmoid(z_γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaMapping {
    pub epsilon: f64,
    pub epsilon_gamma: f64,
}

impl Default for ThetaMapping {
    fn default() -> Self {
        Self { epsilon: WEIGHT_FLOOR, epsilon_gamma: GAMMA_FLOOR }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ThetaMapping {
    pub fn map(&self, raw: &RawOutput) -> MheWeights {
        let mut t = [0.0; THETA_DIM];
        for i in 0..theta::GAMMA {
            t[i] = softplus(raw[i]) + self.epsilon;
        }
        let gamma = self.epsilon_gamma + (1.0 - self.epsilon_gamma) * sigmoid(raw[theta::GAMMA]);
        // The sigmoid underflows to exactly zero for very negative inputs;
        // keep γ inside the open lower bound.
        t[theta::GAMMA] = gamma.max(self.epsilon_gamma.next_up());
        MheWeights::from_theta(&t).expect("fixed length")
    }

    /// Diagonal of `∂θ/∂z`.
    pub fn derivative(&self, raw: &RawOutput) -> RawOutput {
        let mut d = [0.0; THETA_DIM];
        for i in 0..theta::GAMMA {
            d[i] = sigmoid(raw[i]);
        }
        let s = sigmoid(raw[theta::GAMMA]);
        d[theta::GAMMA] = (1.0 - self.epsilon_gamma) * s * (1.0 - s);
        d
    }

    /// Raw output that maps to `weights`.
    pub fn inverse(&self, weights: &MheWeights) -> Result<RawOutput> {
        weights.validate()?;
        let t = weights.to_theta();
        let mut raw = [0.0; THETA_DIM];
        for i in 0..theta::GAMMA {
            let y = t[i] - self.epsilon;
            if !(y > 0.0) {
                return Err(Error::InvalidParameter(format!("{} lies on the weight floor", theta::name(i))));
            }
            raw[i] = if y > 30.0 { y } else { y.exp_m1().ln() };
        }
        let p = (t[theta::GAMMA] - self.epsilon_gamma) / (1.0 - self.epsilon_gamma);
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidParameter("forgetting factor must be strictly inside its range".into()));
        }
        raw[theta::GAMMA] = (p / (1.0 - p)).ln();
        Ok(raw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], biases: vec![0.0; outputs] }
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.outputs, self.inputs, &self.weights)
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.matrix() * x + DVector::from_column_slice(&self.biases)
    }
}

/// Intermediate values kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    inputs: Vec<DVector<f64>>,
    pre_activations: Vec<DVector<f64>>,
}

/// `6 → 30 → 30 → 25`, ReLU hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNet {
    pub layers: Vec<DenseLayer>,
}

impl WeightNet {
    pub fn zeros() -> Self {
        let layers = LAYER_SIZES.windows(2).map(|w| DenseLayer::zeros(w[0], w[1])).collect();
        Self { layers }
    }

    /// Uniform `±scale` weights and hidden biases; the output bias is set to
    /// `output_bias`.
    pub fn initialize(seed_value: u64, scale: f64, output_bias: &RawOutput) -> Self {
        let mut rng = seed::rng(seed_value, &[seed::tag::NET_INIT]);
        let mut net = Self::zeros();
        let last = net.layers.len() - 1;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            for w in layer.weights.iter_mut() {
                *w = rng.random_range(-scale..scale);
            }
            if i == last {
                layer.biases.copy_from_slice(output_bias);
            } else {
                for b in layer.biases.iter_mut() {
                    *b = rng.random_range(-scale..scale);
                }
            }
        }
        net
    }

    pub fn validate(&self) -> Result<()> {
        let shapes: Vec<_> = self.layers.iter().map(|l| (l.inputs, l.outputs)).collect();
        let expected: Vec<_> = LAYER_SIZES.windows(2).map(|w| (w[0], w[1])).collect();
        if shapes != expected {
            return Err(Error::InvalidParameter(format!("architecture {shapes:?} differs from {expected:?}")));
        }
        for l in &self.layers {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::InvalidParameter("layer buffers do not match their shape".into()));
            }
        }
        Ok(())
    }

    pub fn forward_raw(&self, features: &Features) -> (RawOutput, ForwardCache) {
        let mut x = DVector::from_column_slice(features);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&x);
            inputs.push(x);
            x = if i == last { z.clone() } else { z.map(|v| v.max(0.0)) };
            pre_activations.push(z);
        }
        let mut raw = [0.0; THETA_DIM];
        raw.copy_from_slice(x.as_slice());
        (raw, ForwardCache { inputs, pre_activations })
    }

    pub fn forward(&self, features: &Features, mapping: &ThetaMapping) -> MheWeights {
        mapping.map(&self.forward_raw(features).0)
    }

    /// Gradient of a scalar with respect to every parameter, given its
    /// gradient with respect to the raw output. Layout matches
    /// [`WeightNet::parameters`].
    pub fn backward(&self, cache: &ForwardCache, d_raw: &RawOutput) -> Vec<f64> {
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        let mut delta = DVector::from_column_slice(d_raw);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                // ReLU gate of this layer's output.
                delta = delta.zip_map(&cache.pre_activations[i], |d, z| if z > 0.0 { d } else { 0.0 });
            }
            let input = &cache.inputs[i];
            let mut g = Vec::with_capacity(layer.outputs * layer.inputs + layer.outputs);
            for r in 0..layer.outputs {
                for c in 0..layer.inputs {
                    g.push(delta[r] * input[c]);
                }
            }
            g.extend(delta.iter().copied());
            grads[i] = g;
            if i > 0 {
                delta = layer.matrix().transpose() * &delta;
            }
        }
        grads.concat()
    }

    /// Flattened parameters: per layer, row-major weights then biases.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases).copied()).collect()
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != PARAM_COUNT {
            return Err(Error::LengthMismatch { expected: PARAM_COUNT, got: params.len() });
        }
        let mut offset = 0;
        for l in self.layers.iter_mut() {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn parameter_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in self.layers.iter_mut() {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                return &mut l.biases[index];
            }
            index -= l.biases.len();
        }
        panic!("parameter index out of range")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; PARAM_COUNT], v: vec![0.0; PARAM_COUNT], t: 0 }
    }

    pub fn step(&mut self, net: &mut WeightNet, grad: &[f64]) {
        let c = &self.config;
        self.t += 1;
        let b1t = 1.0 - c.beta1.powi(self.t);
        let b2t = 1.0 - c.beta2.powi(self.t);
        let mut params = net.parameters();
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
        net.set_parameters(&params).expect("parameter count is fixed");
    }
}

/// Summed weighted tracking error over the horizon, with
/// `‖x‖_W = √(xᵀWx)` (or `xᵀWx` when `squared`).
pub fn tracking_loss(
    estimates: &[AugmentedState],
    reference: &[AugmentedState],
    w: &StateMatrix,
    squared: bool,
) -> Result<f64> {
    Ok(tracking_loss_gradient(estimates, reference, w, squared)?.0)
}

/// Loss and its gradient with respect to each estimate. The square-root
/// norm has no gradient at zero error; zero is used there.
pub fn tracking_loss_gradient(
    estimates: &[AugmentedState],
    reference: &[AugmentedState],
    w: &StateMatrix,
    squared: bool,
) -> Result<(f64, Vec<StateVector>)> {
    if estimates.len() != reference.len() {
        return Err(Error::LengthMismatch { expected: reference.len(), got: estimates.len() });
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(estimates.len());
    for (x, r) in estimates.iter().zip(reference) {
        let e = x.0 - r.0;
        let we = w * e;
        let q = e.dot(&we).max(0.0);
        if squared {
            loss += q;
            grads.push(we * 2.0);
        } else {
            let norm = q.sqrt();
            loss += norm;
            grads.push(if norm > 0.0 { we / norm } else { StateVector::zeros() });
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub context: String,
    pub context_codes: (u8, u8),
    pub seed: u64,
    pub loss_history: Vec<f64>,
    pub converged: bool,
    pub skipped_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub architecture: Vec<usize>,
    pub layers: Vec<DenseLayer>,
    pub mapping: ThetaMapping,
    pub metadata: CheckpointMetadata,
}

impl Checkpoint {
    pub fn new(net: &WeightNet, mapping: ThetaMapping, metadata: CheckpointMetadata) -> Self {
        Self { architecture: LAYER_SIZES.to_vec(), layers: net.layers.clone(), mapping, metadata }
    }

    pub fn network(&self) -> Result<WeightNet> {
        if self.architecture != LAYER_SIZES {
            return Err(Error::InvalidParameter(format!("unsupported architecture {:?}", self.architecture)));
        }
        let net = WeightNet { layers: self.layers.clone() };
        net.validate()?;
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.network()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
