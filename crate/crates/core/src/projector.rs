//! The semantic projection network: a stack of dense layers with ReLU,
//! exact reverse-mode gradients, and an Adam optimizer.
//!
//! Parameters are stored in one flat buffer, layer after layer, each layer
//! as an `out x in` row-major weight block followed by its `out` biases.
//! Gradients and optimizer moments reuse the same [`MlpWeights`] shape.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{axpy, dot, Matrix};

pub const DEFAULT_HIDDEN: [usize; 2] = [512, 768];
pub const DEFAULT_FEATURE_DIM: usize = 1024;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Parameters of a fully connected ReLU network.
#[derive(Debug, Clone)]
pub struct MlpWeights {
    dims: Vec<usize>,
    final_relu: bool,
    params: Vec<f64>,
    // Identifies this exact parameter state; refreshed on every mutation.
    id: u64,
}

impl PartialEq for MlpWeights {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.final_relu == other.final_relu && self.params == other.params
    }
}

/// Borrowed view of one dense layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weight: &'a [f64],
    pub bias: &'a [f64],
}

fn param_count_for(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::config("a network needs an input and an output dimension"));
    }
    if dims.contains(&0) {
        return Err(Error::config(format!("layer dimensions must be positive: {dims:?}")));
    }
    Ok(())
}

impl MlpWeights {
    pub fn zeros(dims: &[usize], final_relu: bool) -> Result<Self> {
        validate_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            final_relu,
            params: vec![0.0; param_count_for(dims)],
            id: fresh_id(),
        })
    }

    pub fn from_params(dims: &[usize], final_relu: bool, params: Vec<f64>) -> Result<Self> {
        validate_dims(dims)?;
        let expected = param_count_for(dims);
        if params.len() != expected {
            return Err(Error::DimMismatch {
                expected,
                actual: params.len(),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            final_relu,
            params,
            id: fresh_id(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            final_relu: self.final_relu,
            params: vec![0.0; self.params.len()],
            id: fresh_id(),
        }
    }

    pub fn with_final_relu(mut self, on: bool) -> Self {
        self.final_relu = on;
        self.id = fresh_id();
        self
    }

    /// `[input, hidden..., output]`
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated dims")
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn final_relu(&self) -> bool {
        self.final_relu
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.id = fresh_id();
        &mut self.params
    }

    fn layer_offset(&self, k: usize) -> usize {
        param_count_for(&self.dims[..=k])
    }

    pub fn layer(&self, k: usize) -> LayerView<'_> {
        let (in_dim, out_dim) = (self.dims[k], self.dims[k + 1]);
        let start = self.layer_offset(k);
        let (weight, rest) = self.params[start..].split_at(in_dim * out_dim);
        LayerView {
            in_dim,
            out_dim,
            weight,
            bias: &rest[..out_dim],
        }
    }

    /// Mutable `(weight, bias)` of layer `k`.
    pub fn layer_mut(&mut self, k: usize) -> (&mut [f64], &mut [f64]) {
        let (in_dim, out_dim) = (self.dims[k], self.dims[k + 1]);
        let start = self.layer_offset(k);
        self.id = fresh_id();
        let (weight, rest) = self.params[start..].split_at_mut(in_dim * out_dim);
        (weight, &mut rest[..out_dim])
    }

    /// Whether flat parameter `i` is a weight (as opposed to a bias).
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.params.len());
        for w in self.dims.windows(2) {
            mask.extend(std::iter::repeat_n(true, w[0] * w[1]));
            mask.extend(std::iter::repeat_n(false, w[1]));
        }
        mask
    }

    /// Sum of squared weight-matrix entries; biases excluded.
    pub fn weight_sq_norm(&self) -> f64 {
        (0..self.num_layers())
            .map(|k| self.layer(k).weight.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    /// Adds `scale * other` in place. Shapes must match.
    pub fn add_scaled(&mut self, scale: f64, other: &MlpWeights) -> Result<()> {
        self.check_same_shape(other)?;
        axpy(self.params_mut(), scale, &other.params);
        Ok(())
    }

    pub fn check_same_shape(&self, other: &MlpWeights) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch {
                expected: self.params.len(),
                actual: other.params.len(),
            });
        }
        Ok(())
    }

    /// Copy with every parameter rounded to `f32`, matching what a
    /// checkpoint stores.
    pub fn rounded_to_f32(&self) -> MlpWeights {
        let mut out = self.clone();
        for p in out.params_mut() {
            *p = *p as f32 as f64;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// Glorot-style uniform init in `±sqrt(6 / fan_in)`, zero biases, final
/// ReLU enabled.
pub fn init_weights(d: usize, hidden: &[usize], m: usize, seed: u64) -> Result<MlpWeights> {
    if hidden.is_empty() {
        return Err(Error::config("the projection network needs at least one hidden layer"));
    }
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(d);
    dims.extend_from_slice(hidden);
    dims.push(m);
    let mut w = MlpWeights::zeros(&dims, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..w.num_layers() {
        let fan_in = dims[k] as f64;
        let bound = (6.0 / fan_in).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let (weight, _) = w.layer_mut(k);
        for v in weight.iter_mut() {
            *v = dist.sample(&mut rng);
        }
    }
    Ok(w)
}

/// Activations recorded by a forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    weights_id: u64,
    /// `acts[0]` is the input, `acts[k + 1]` the output of layer `k`.
    acts: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.acts.last().expect("at least one layer")
    }

    /// Which hidden units were active, in layer then row order. Two passes
    /// with equal patterns lie on the same linear piece of the network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.acts[1..]
            .iter()
            .flat_map(|a| a.as_slice().iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn into_output(mut self) -> Matrix {
        self.acts.pop().expect("at least one layer")
    }
}

/// Runs every row of `inputs` through the network.
pub fn forward_batch(w: &MlpWeights, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if inputs.cols() != w.input_dim() {
        return Err(Error::DimMismatch {
            expected: w.input_dim(),
            actual: inputs.cols(),
        });
    }
    let rows = inputs.rows();
    let layers = w.num_layers();
    let mut acts = Vec::with_capacity(layers + 1);
    acts.push(inputs.clone());
    for k in 0..layers {
        let layer = w.layer(k);
        let relu = k + 1 < layers || w.final_relu;
        let a = &acts[k];
        let mut z = Matrix::zeros(rows, layer.out_dim);
        for o in 0..layer.out_dim {
            let w_row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
            let b = layer.bias[o];
            for r in 0..rows {
                let mut v = dot(a.row(r), w_row) + b;
                if relu && v <= 0.0 {
                    v = 0.0;
                }
                z.set(r, o, v);
            }
        }
        acts.push(z);
    }
    let out = acts.last().expect("layer output").clone();
    Ok((
        out,
        ForwardCache {
            weights_id: w.id,
            acts,
        },
    ))
}

/// Single-vector forward pass.
pub fn forward(w: &MlpWeights, e: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    let input = Matrix::from_vec(1, e.len(), e.to_vec())?;
    let (out, cache) = forward_batch(w, &input)?;
    Ok((out.into_vec(), cache))
}

/// Forward pass without keeping the cache.
pub fn project(w: &MlpWeights, inputs: &Matrix) -> Result<Matrix> {
    forward_batch(w, inputs).map(|(out, _)| out)
}

/// Parameter gradient of `sum_r <grad_outputs[r], f(inputs[r])>`.
pub fn backward_batch(
    w: &MlpWeights,
    cache: &ForwardCache,
    grad_outputs: &Matrix,
) -> Result<MlpWeights> {
    if cache.weights_id != w.id || cache.acts.len() != w.num_layers() + 1 {
        return Err(Error::CacheMismatch);
    }
    let out = cache.output();
    if grad_outputs.rows() != out.rows() || grad_outputs.cols() != out.cols() {
        return Err(Error::DimMismatch {
            expected: out.rows() * out.cols(),
            actual: grad_outputs.rows() * grad_outputs.cols(),
        });
    }
    let rows = out.rows();
    let layers = w.num_layers();
    let mut grads = w.zeros_like();

    let mut delta = grad_outputs.clone();
    if w.final_relu {
        mask_inactive(&mut delta, out);
    }
    for k in (0..layers).rev() {
        let layer = w.layer(k);
        let a = &cache.acts[k];
        {
            let (gw, gb) = grads.layer_mut(k);
            for o in 0..layer.out_dim {
                let gw_row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for r in 0..rows {
                    let d = delta.get(r, o);
                    if d != 0.0 {
                        gb[o] += d;
                        axpy(gw_row, d, a.row(r));
                    }
                }
            }
        }
        if k > 0 {
            let mut prev = Matrix::zeros(rows, layer.in_dim);
            for o in 0..layer.out_dim {
                let w_row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                for r in 0..rows {
                    let d = delta.get(r, o);
                    if d != 0.0 {
                        axpy(prev.row_mut(r), d, w_row);
                    }
                }
            }
            // Hidden layers always carry a ReLU.
            mask_inactive(&mut prev, a);
            delta = prev;
        }
    }
    Ok(grads)
}

/// Single-vector backward pass.
pub fn backward(w: &MlpWeights, cache: &ForwardCache, grad_output: &[f64]) -> Result<MlpWeights> {
    let g = Matrix::from_vec(1, grad_output.len(), grad_output.to_vec())?;
    backward_batch(w, cache, &g)
}

// ReLU'(z) is 1 for z > 0 and 0 otherwise, including z == 0. The stored
// activation is positive exactly when the pre-activation was.
fn mask_inactive(delta: &mut Matrix, activation: &Matrix) {
    for (d, a) in delta.as_mut_slice().iter_mut().zip(activation.as_slice()) {
        if *a <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(w: &MlpWeights, lr: f64) -> Self {
        Self {
            first_moment: vec![0.0; w.param_count()],
            second_moment: vec![0.0; w.param_count()],
            step_count: 0,
            lr,
            beta1: Self::DEFAULT_BETA1,
            beta2: Self::DEFAULT_BETA2,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// Applies one update to `w` in place.
    pub fn step(&mut self, w: &mut MlpWeights, grads: &MlpWeights) -> Result<()> {
        w.check_same_shape(grads)?;
        if self.first_moment.len() != w.param_count() {
            return Err(Error::DimMismatch {
                expected: self.first_moment.len(),
                actual: w.param_count(),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let params = w.params_mut();
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(&grads.params)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(
    w: &MlpWeights,
    grads: &MlpWeights,
    state: &AdamState,
) -> Result<(MlpWeights, AdamState)> {
    let mut w = w.clone();
    let mut state = state.clone();
    state.step(&mut w, grads)?;
    Ok((w, state))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON header of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dims: Vec<usize>,
    pub final_relu: bool,
    pub param_count: usize,
    pub seed: u64,
    pub step_count: u64,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Checkpoint layout:
///
/// ```text
/// b"HBCK" | version u32 LE | header_len u32 LE | header JSON (header_len bytes)
///         | param_count f32 LE, flat parameter order
/// ```
pub fn encode_checkpoint(
    w: &MlpWeights,
    seed: u64,
    step_count: u64,
    config: serde_json::Value,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        dims: w.dims.clone(),
        final_relu: w.final_relu,
        param_count: w.param_count(),
        seed,
        step_count,
        config,
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::format("header too large"))?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * w.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for &p in &w.params {
        let f = p as f32;
        if !f.is_finite() {
            return Err(Error::CorruptData(format!("parameter {p} does not fit f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(MlpWeights, CheckpointHeader)> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < header_len {
        return Err(Error::format("checkpoint header truncated"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint format_version {}",
            header.format_version
        )));
    }
    validate_dims(&header.dims).map_err(|e| Error::format(e.to_string()))?;
    let expected = param_count_for(&header.dims);
    if header.param_count != expected {
        return Err(Error::format(format!(
            "header param_count {} does not match dims ({expected})",
            header.param_count
        )));
    }
    let payload = &body[header_len..];
    if payload.len() != expected * 4 {
        return Err(Error::format(format!(
            "checkpoint payload is {} bytes, expected {}",
            payload.len(),
            expected * 4
        )));
    }
    let mut params = Vec::with_capacity(expected);
    for c in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::CorruptData("non-finite parameter".into()));
        }
        params.push(v as f64);
    }
    let w = MlpWeights::from_params(&header.dims, header.final_relu, params)?;
    Ok((w, header))
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    w: &MlpWeights,
    seed: u64,
    step_count: u64,
    config: serde_json::Value,
) -> Result<()> {
    fs::write(path.as_ref(), encode_checkpoint(w, seed, step_count, config)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(MlpWeights, CheckpointHeader)> {
    decode_checkpoint(&fs::read(path.as_ref())?)
}
