//! Dense multilayer perceptrons with hand-written reverse-mode gradients.
//!
//! Every network in the crate (actors, critics, constraint-sensitivity models)
//! is an [`Mlp`]: a stack of affine layers, ReLU (or another [`Activation`]) on
//! the hidden layers and a separate activation on the output layer.
//!
//! Layout conventions:
//!
//! - weights of layer `l` are row-major with shape `(dims[l + 1], dims[l])`;
//! - batched inputs and outputs are flat row-major buffers, one sample per row;
//! - the flat parameter index used by [`Mlp::param`] walks layer 0 weights,
//!   layer 0 biases, layer 1 weights, and so on.
//!
//! Batched passes go through `matrixmultiply::dgemm`; with a single thread the
//! summation order is fixed, so forward passes are bitwise reproducible.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    /// ReLU at exactly zero gets slope 0.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Tanh),
            other => Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
        }
    }
}

/// One affine layer, `z = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    hidden_activation: Activation,
    output_activation: Activation,
}

/// Parameter and input gradients, congruent to the owning [`Mlp`].
///
/// For batched backward passes the parameter gradients are summed over the
/// batch and `input_grad` holds one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weight_grads: Vec<Vec<f64>>,
    pub bias_grads: Vec<Vec<f64>>,
    pub input_grad: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            weight_grads: mlp.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias_grads: mlp.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
            input_grad: Vec::new(),
        }
    }

    /// Gradient entry at a flat parameter index (see [`Mlp::param`]).
    pub fn param(&self, index: usize) -> f64 {
        let mut rest = index;
        for (w, b) in self.weight_grads.iter().zip(&self.bias_grads) {
            if rest < w.len() {
                return w[rest];
            }
            rest -= w.len();
            if rest < b.len() {
                return b[rest];
            }
            rest -= b.len();
        }
        panic!("gradient index {index} out of range");
    }

    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut rest = index;
        for (w, b) in self.weight_grads.iter_mut().zip(self.bias_grads.iter_mut()) {
            if rest < w.len() {
                return &mut w[rest];
            }
            rest -= w.len();
            if rest < b.len() {
                return &mut b[rest];
            }
            rest -= b.len();
        }
        panic!("gradient index {index} out of range");
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.weight_grads.iter_mut().chain(self.bias_grads.iter_mut()) {
            g.iter_mut().for_each(|v| *v *= factor);
        }
        self.input_grad.iter_mut().for_each(|v| *v *= factor);
    }

    /// Euclidean norm over all parameter gradients.
    pub fn param_norm(&self) -> f64 {
        self.weight_grads
            .iter()
            .chain(&self.bias_grads)
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Which gradients a batched backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardMode {
    Params,
    Input,
    All,
}

impl BackwardMode {
    fn params(self) -> bool {
        matches!(self, BackwardMode::Params | BackwardMode::All)
    }

    fn input(self) -> bool {
        matches!(self, BackwardMode::Input | BackwardMode::All)
    }
}

/// Activations recorded by [`Mlp::forward_tape`]: entry 0 is the input batch,
/// entry `l + 1` the post-activation output of layer `l`.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("tape always holds the input")
    }
}

/// `c = a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers pass buffers whose extents cover every strided
    // element touched for the given (m, k, n); c is row-major m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    /// Builds a network with weights uniform in `±1/sqrt(fan_in)` and zero biases.
    pub fn new<R: Rng + ?Sized>(
        layer_dims: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mlp = Self::zeros(layer_dims, hidden_activation, output_activation)?;
        for layer in &mut mlp.layers {
            let limit = 1.0 / (layer.in_dim as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-limit..=limit);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(
        layer_dims: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidLayout(format!(
                "need at least an input and an output dimension, got {layer_dims:?}"
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidLayout(format!(
                "layer dimensions must be positive, got {layer_dims:?}"
            )));
        }
        let layers = layer_dims
            .windows(2)
            .map(|w| Layer {
                in_dim: w[0],
                out_dim: w[1],
                weights: vec![0.0; w[0] * w[1]],
                biases: vec![0.0; w[1]],
            })
            .collect();
        Ok(Mlp {
            layers,
            hidden_activation,
            output_activation,
        })
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn param(&self, index: usize) -> f64 {
        let mut rest = index;
        for l in &self.layers {
            if rest < l.weights.len() {
                return l.weights[rest];
            }
            rest -= l.weights.len();
            if rest < l.biases.len() {
                return l.biases[rest];
            }
            rest -= l.biases.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut rest = index;
        for l in &mut self.layers {
            if rest < l.weights.len() {
                return &mut l.weights[rest];
            }
            rest -= l.weights.len();
            if rest < l.biases.len() {
                return &mut l.biases[rest];
            }
            rest -= l.biases.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("mlp input", self.input_dim(), input.len())?;
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mlp input"));
        }
        self.forward_batch(input, 1)
    }

    /// Forward pass over `batch` row-major samples.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self.forward_tape(inputs, batch)?.activations.pop().unwrap_or_default())
    }

    /// Forward pass that keeps every layer's output for a later backward pass.
    pub fn forward_tape(&self, inputs: &[f64], batch: usize) -> Result<Tape> {
        check_len("mlp batch input", batch * self.input_dim(), inputs.len())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.to_vec());
        for (idx, layer) in self.layers.iter().enumerate() {
            let x = activations.last().expect("non-empty");
            let mut z = Vec::with_capacity(batch * layer.out_dim);
            for _ in 0..batch {
                z.extend_from_slice(&layer.biases);
            }
            gemm(
                batch,
                layer.in_dim,
                layer.out_dim,
                x,
                layer.in_dim as isize,
                1,
                &layer.weights,
                1,
                layer.in_dim as isize,
                1.0,
                &mut z,
            );
            let act = self.activation_of(idx);
            if act != Activation::Identity {
                z.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            activations.push(z);
        }
        Ok(Tape { batch, activations })
    }

    /// Reverse-mode gradients of `upstream^T * forward(input)` for one sample.
    pub fn backward(&self, input: &[f64], upstream_grad: &[f64]) -> Result<Gradients> {
        check_len("mlp input", self.input_dim(), input.len())?;
        let tape = self.forward_tape(input, 1)?;
        self.backward_tape(&tape, upstream_grad, BackwardMode::All)
    }

    /// Backward pass over a recorded batch. `upstream` holds one gradient row
    /// per sample; parameter gradients are summed over the batch.
    pub fn backward_tape(
        &self,
        tape: &Tape,
        upstream: &[f64],
        mode: BackwardMode,
    ) -> Result<Gradients> {
        let batch = tape.batch;
        check_len("mlp upstream gradient", batch * self.output_dim(), upstream.len())?;
        check_len("mlp tape", self.layers.len() + 1, tape.activations.len())?;

        let mut grads = Gradients::zeros_like(self);
        let mut delta = upstream.to_vec();
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let y = &tape.activations[idx + 1];
            let x = &tape.activations[idx];
            let act = self.activation_of(idx);
            if act != Activation::Identity {
                for (d, &yv) in delta.iter_mut().zip(y) {
                    *d *= act.derivative_from_output(yv);
                }
            }

            if mode.params() {
                // dW = delta^T x, db = column sums of delta
                gemm(
                    layer.out_dim,
                    batch,
                    layer.in_dim,
                    &delta,
                    1,
                    layer.out_dim as isize,
                    x,
                    layer.in_dim as isize,
                    1,
                    0.0,
                    &mut grads.weight_grads[idx],
                );
                let bg = &mut grads.bias_grads[idx];
                for row in delta.chunks_exact(layer.out_dim) {
                    for (g, d) in bg.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }

            if idx > 0 || mode.input() {
                let mut next = vec![0.0; batch * layer.in_dim];
                gemm(
                    batch,
                    layer.out_dim,
                    layer.in_dim,
                    &delta,
                    layer.out_dim as isize,
                    1,
                    &layer.weights,
                    layer.in_dim as isize,
                    1,
                    0.0,
                    &mut next,
                );
                delta = next;
            }
        }
        if mode.input() {
            grads.input_grad = delta;
        }
        Ok(grads)
    }

    /// Smallest |pre-activation| over the hidden ReLU units for one input;
    /// finite-difference probes closer than the step to a kink are unreliable.
    pub fn min_abs_hidden_preactivation(&self, input: &[f64]) -> Result<f64> {
        check_len("mlp input", self.input_dim(), input.len())?;
        let mut x = input.to_vec();
        let mut min = f64::INFINITY;
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut z = layer.biases.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                *zo += row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
            }
            let act = self.activation_of(idx);
            if idx + 1 < self.layers.len() && act == Activation::Relu {
                min = z.iter().fold(min, |m, v| m.min(v.abs()));
            }
            x = z.into_iter().map(|v| act.apply(v)).collect();
        }
        Ok(min)
    }

    /// `self <- tau * source + (1 - tau) * self`, parameter by parameter.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) -> Result<()> {
        if self.layer_dims() != source.layer_dims() {
            return Err(Error::InvalidLayout(format!(
                "soft update between {:?} and {:?}",
                self.layer_dims(),
                source.layer_dims()
            )));
        }
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            for (tv, sv) in t.weights.iter_mut().zip(&s.weights) {
                *tv = tau * sv + (1.0 - tau) * *tv;
            }
            for (tv, sv) in t.biases.iter_mut().zip(&s.biases) {
                *tv = tau * sv + (1.0 - tau) * *tv;
            }
        }
        Ok(())
    }

    /// Largest absolute parameter difference between two congruent networks.
    pub fn max_abs_diff(&self, other: &Mlp) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| {
                a.weights
                    .iter()
                    .zip(&b.weights)
                    .chain(a.biases.iter().zip(&b.biases))
            })
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    // Checkpoint layout (little-endian):
    //   b"MLPCKPT1"
    //   u32 number of dims, then each dim as u64
    //   u8 hidden activation tag, u8 output activation tag (0 identity, 1 relu, 2 tanh)
    //   per layer: weights row-major (out x in) as f64, then biases as f64
    const MAGIC: &'static [u8; 8] = b"MLPCKPT1";

    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(Self::MAGIC)?;
        let dims = self.layer_dims();
        out.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        out.write_all(&[self.hidden_activation.tag(), self.output_activation.tag()])?;
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.biases) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != Self::MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf).map_err(io)?;
        let n_dims = u32::from_le_bytes(u32buf) as usize;
        if n_dims > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_dims}")));
        }
        let mut dims = Vec::with_capacity(n_dims);
        let mut u64buf = [0u8; 8];
        for _ in 0..n_dims {
            input.read_exact(&mut u64buf).map_err(io)?;
            dims.push(u64::from_le_bytes(u64buf) as usize);
        }
        let mut tags = [0u8; 2];
        input.read_exact(&mut tags).map_err(io)?;
        let mut mlp = Mlp::zeros(
            &dims,
            Activation::from_tag(tags[0])?,
            Activation::from_tag(tags[1])?,
        )?;
        for l in &mut mlp.layers {
            for v in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                input.read_exact(&mut u64buf).map_err(io)?;
                *v = f64::from_le_bytes(u64buf);
            }
        }
        if !mlp.all_finite() {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        Ok(mlp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut BufReader::new(file))
    }
}

/// Adam moments for every parameter tensor of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(mlp: &Mlp, learning_rate: f64) -> Self {
        let shapes: Vec<usize> = mlp
            .layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.biases.len()])
            .collect();
        AdamState {
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn second_moment(&self) -> impl Iterator<Item = f64> + '_ {
        self.second_moment.iter().flatten().copied()
    }
}

/// One bias-corrected Adam descent step on `mlp` along `grads`.
pub fn adam_step(mlp: &mut Mlp, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    check_len("adam layers", mlp.layers.len(), grads.weight_grads.len())?;
    check_len("adam layers", mlp.layers.len(), grads.bias_grads.len())?;
    check_len("adam moments", 2 * mlp.layers.len(), state.first_moment.len())?;
    for (idx, l) in mlp.layers.iter().enumerate() {
        check_len("adam weight grads", l.weights.len(), grads.weight_grads[idx].len())?;
        check_len("adam bias grads", l.biases.len(), grads.bias_grads[idx].len())?;
        check_len("adam moments", l.weights.len(), state.first_moment[2 * idx].len())?;
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let eps = state.epsilon;

    for (idx, l) in mlp.layers.iter_mut().enumerate() {
        let tensors = [
            (&mut l.weights, &grads.weight_grads[idx], 2 * idx),
            (&mut l.biases, &grads.bias_grads[idx], 2 * idx + 1),
        ];
        for (params, g, slot) in tensors {
            let m = &mut state.first_moment[slot];
            let v = &mut state.second_moment[slot];
            for i in 0..params.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// A single coordinate compared by the finite-difference checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Param(usize),
    Input(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_probe: Option<Probe>,
    pub checked: usize,
    /// Probes whose ±step flipped a ReLU and were therefore not compared.
    pub skipped_kinks: usize,
    pub passed: bool,
}

pub const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;

/// Relative deviation used by the checker: `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_deviation(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks [`Mlp::backward`] for `sum(forward(input))` against central
/// differences on every parameter and input coordinate.
pub fn grad_check(mlp: &Mlp, input: &[f64], tolerance: f64) -> Result<GradCheckReport> {
    let upstream = vec![1.0; mlp.output_dim()];
    let grads = mlp.backward(input, &upstream)?;
    let probes: Vec<Probe> = (0..mlp.param_count())
        .map(Probe::Param)
        .chain((0..mlp.input_dim()).map(Probe::Input))
        .collect();
    compare_with_finite_differences(mlp, input, &upstream, &grads, &probes, tolerance)
}

/// Compares supplied gradients of `upstream^T * forward(input)` with central
/// differences at the given probes.
pub fn compare_with_finite_differences(
    mlp: &Mlp,
    input: &[f64],
    upstream: &[f64],
    grads: &Gradients,
    probes: &[Probe],
    tolerance: f64,
) -> Result<GradCheckReport> {
    check_len("grad check upstream", mlp.output_dim(), upstream.len())?;
    check_len("grad check input grad", mlp.input_dim(), grads.input_grad.len())?;
    let objective = |net: &Mlp, x: &[f64]| -> Result<f64> {
        Ok(net
            .forward(x)?
            .iter()
            .zip(upstream)
            .map(|(y, u)| y * u)
            .sum())
    };
    let pattern = |net: &Mlp, x: &[f64]| -> Result<Vec<bool>> {
        let tape = net.forward_tape(x, 1)?;
        Ok(tape.activations[1..tape.activations.len() - 1]
            .iter()
            .flatten()
            .map(|v| *v > 0.0)
            .collect())
    };
    let base_pattern = pattern(mlp, input)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_probe: None,
        checked: 0,
        skipped_kinks: 0,
        passed: true,
    };
    let mut net = mlp.clone();
    let mut x = input.to_vec();
    for &probe in probes {
        let (analytic, plus, minus, kink) = match probe {
            Probe::Param(i) => {
                let orig = net.param(i);
                *net.param_mut(i) = orig + FD_STEP;
                let plus = objective(&net, &x)?;
                let kink_plus = pattern(&net, &x)? != base_pattern;
                *net.param_mut(i) = orig - FD_STEP;
                let minus = objective(&net, &x)?;
                let kink_minus = pattern(&net, &x)? != base_pattern;
                *net.param_mut(i) = orig;
                (grads.param(i), plus, minus, kink_plus || kink_minus)
            }
            Probe::Input(i) => {
                let orig = x[i];
                x[i] = orig + FD_STEP;
                let plus = objective(&net, &x)?;
                let kink_plus = pattern(&net, &x)? != base_pattern;
                x[i] = orig - FD_STEP;
                let minus = objective(&net, &x)?;
                let kink_minus = pattern(&net, &x)? != base_pattern;
                x[i] = orig;
                (grads.input_grad[i], plus, minus, kink_plus || kink_minus)
            }
        };
        if kink {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let dev = relative_deviation(analytic, numeric);
        report.checked += 1;
        if report.worst_probe.is_none() || dev > report.max_rel_error {
            report.max_rel_error = dev;
            report.worst_probe = Some(probe);
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}
