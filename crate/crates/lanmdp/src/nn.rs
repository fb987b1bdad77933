//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! All math is plain `f64` over flat row-major buffers. The networks in this
//! crate are tiny (tens of hidden units) but are evaluated millions of times
//! inside samplers, so a fixed layout with no indirection is the right trade.
//!
//! The activation applies to hidden layers only; the output layer is always
//! linear. Gradients are exact reverse-mode, not approximations: the finite
//! difference tests in this module pin that down.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Serialization version for network files.
pub const MLP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x * sigmoid(x)`; smooth, non-monotone near zero.
    Swish,
    /// `max(x, LEAKY_SLOPE * x)`.
    LeakyRelu,
    /// Pass-through; turns the net into an affine map.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Swish => x * sigmoid(x),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x`. For the leaky rectifier the slope at
    /// exactly 0 is the negative-side slope, keeping gradients deterministic.
    #[inline]
    pub fn slope(self, x: f64) -> f64 {
        match self {
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Parameters of a fully-connected network.
///
/// `weights[l]` is the `layer_dims[l+1] x layer_dims[l]` matrix of layer `l`
/// in row-major order; `biases[l]` has length `layer_dims[l+1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Checks that every buffer length matches `layer_dims`. Used after
    /// deserialization, where the shapes cannot be trusted.
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::format("network needs at least input and output dims"));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::format("zero-sized layer"));
        }
        let n = self.n_layers();
        if self.weights.len() != n || self.biases.len() != n {
            return Err(Error::format(format!(
                "expected {} weight/bias tensors, found {}/{}",
                n,
                self.weights.len(),
                self.biases.len()
            )));
        }
        for l in 0..n {
            let (rows, cols) = (self.layer_dims[l + 1], self.layer_dims[l]);
            if self.weights[l].len() != rows * cols {
                return Err(Error::format(format!(
                    "layer {l} weights: expected {}x{} = {} entries, found {}",
                    rows,
                    cols,
                    rows * cols,
                    self.weights[l].len()
                )));
            }
            if self.biases[l].len() != rows {
                return Err(Error::format(format!(
                    "layer {l} biases: expected {rows} entries, found {}",
                    self.biases[l].len()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.biases.iter()).all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn to_json(&self) -> String {
        let file = MlpFile { version: MLP_FORMAT_VERSION, net: self.clone() };
        serde_json::to_string_pretty(&file).expect("network serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MlpFile = serde_json::from_str(text)?;
        if file.version != MLP_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported network format version {} (expected {MLP_FORMAT_VERSION})",
                file.version
            )));
        }
        file.net.validate()?;
        Ok(file.net)
    }
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    version: u32,
    net: MlpParams,
}

/// Glorot-uniform initialization: weights uniform in
/// `±sqrt(6 / (fan_in + fan_out))`, biases zero. Deterministic in `seed`.
pub fn mlp_init(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<MlpParams> {
    if layer_dims.len() < 2 {
        return Err(Error::config("network needs at least input and output dims"));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::config("layer dims must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(layer_dims.len() - 1);
    let mut biases = Vec::with_capacity(layer_dims.len() - 1);
    for w in layer_dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let layer: Vec<f64> =
            (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        weights.push(layer);
        biases.push(vec![0.0; fan_out]);
    }
    Ok(MlpParams { layer_dims: layer_dims.to_vec(), weights, biases, activation })
}

/// Forward pass.
///
/// Panics if `input.len() != params.layer_dims[0]`; shape is a caller
/// contract on this hot path.
pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Vec<f64> {
    assert_eq!(input.len(), params.input_dim(), "input length mismatch");
    let mut act = input.to_vec();
    let last = params.n_layers() - 1;
    for l in 0..params.n_layers() {
        let mut z = affine(params, l, &act);
        if l != last {
            for v in &mut z {
                *v = params.activation.apply(*v);
            }
        }
        act = z;
    }
    act
}

#[inline]
fn affine(params: &MlpParams, l: usize, input: &[f64]) -> Vec<f64> {
    let (rows, cols) = (params.layer_dims[l + 1], params.layer_dims[l]);
    let w = &params.weights[l];
    let b = &params.biases[l];
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wi, xi) in row.iter().zip(input) {
            acc += wi * xi;
        }
        out.push(acc);
    }
    out
}

/// Parameter-shaped gradient accumulator, mirroring [`MlpParams`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// `self += c * other`. Shapes must match.
    pub fn axpy(&mut self, c: f64, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for v in t.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.biases.iter()).all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .flat_map(|t| t.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Reverse-mode gradient: given the cotangent of the output, returns the
/// gradient with respect to every parameter and to the input.
///
/// Panics on input or cotangent length mismatch.
pub fn mlp_grad(params: &MlpParams, input: &[f64], output_cotangent: &[f64]) -> (MlpGrads, Vec<f64>) {
    assert_eq!(input.len(), params.input_dim(), "input length mismatch");
    assert_eq!(output_cotangent.len(), params.output_dim(), "cotangent length mismatch");

    let n = params.n_layers();
    let last = n - 1;
    // Forward, caching layer inputs and hidden pre-activations.
    let mut layer_inputs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut preacts: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut act = input.to_vec();
    for l in 0..n {
        layer_inputs.push(act.clone());
        let z = affine(params, l, &act);
        preacts.push(z.clone());
        act = if l == last {
            z
        } else {
            z.into_iter().map(|v| params.activation.apply(v)).collect()
        };
    }

    // Backward.
    let mut grads = MlpGrads::zeros_like(params);
    let mut delta = output_cotangent.to_vec(); // d(objective)/d(layer output)
    for l in (0..n).rev() {
        if l != last {
            for (d, z) in delta.iter_mut().zip(&preacts[l]) {
                *d *= params.activation.slope(*z);
            }
        }
        let (rows, cols) = (params.layer_dims[l + 1], params.layer_dims[l]);
        let x = &layer_inputs[l];
        let gw = &mut grads.weights[l];
        for r in 0..rows {
            let dr = delta[r];
            grads.biases[l][r] += dr;
            let row = &mut gw[r * cols..(r + 1) * cols];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += dr * xi;
            }
        }
        // delta for the previous layer's output: W^T delta.
        let w = &params.weights[l];
        let mut prev = vec![0.0; cols];
        for r in 0..rows {
            let dr = delta[r];
            let row = &w[r * cols..(r + 1) * cols];
            for (p, wi) in prev.iter_mut().zip(row) {
                *p += dr * wi;
            }
        }
        delta = prev;
    }
    (grads, delta)
}

/// Adam / AdamW state. Weight decay is decoupled (applied directly to the
/// parameters, not folded into the gradient); `weight_decay == 0` gives
/// plain Adam.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m_weights: Vec<Vec<f64>>,
    m_biases: Vec<Vec<f64>>,
    v_weights: Vec<Vec<f64>>,
    v_biases: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &MlpParams, lr: f64) -> Self {
        let zw: Vec<Vec<f64>> = params.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let zb: Vec<Vec<f64>> = params.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        OptimState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m_weights: zw.clone(),
            m_biases: zb.clone(),
            v_weights: zw,
            v_biases: zb,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer step in place. The gradient is the direction of *descent*
/// (callers minimizing a loss pass its gradient unmodified).
///
/// Errors if any gradient entry is non-finite, naming the offending tensor;
/// parameters are untouched in that case.
pub fn optim_step(opt: &mut OptimState, params: &mut MlpParams, grads: &MlpGrads) -> Result<()> {
    for (l, t) in grads.weights.iter().enumerate() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("layer {l} weight gradient")));
        }
    }
    for (l, t) in grads.biases.iter().enumerate() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("layer {l} bias gradient")));
        }
    }

    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);

    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], decay: bool| {
        for i in 0..p.len() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            if decay && opt.weight_decay > 0.0 {
                p[i] -= opt.lr * opt.weight_decay * p[i];
            }
            p[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    };

    for l in 0..params.weights.len() {
        update(
            &mut params.weights[l],
            &grads.weights[l],
            &mut opt.m_weights[l],
            &mut opt.v_weights[l],
            true,
        );
    }
    for l in 0..params.biases.len() {
        // Decay applies to weights only; biases follow the usual convention.
        update(&mut params.biases[l], &grads.biases[l], &mut opt.m_biases[l], &mut opt.v_biases[l], false);
    }
    Ok(())
}
