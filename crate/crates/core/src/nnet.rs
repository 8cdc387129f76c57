//! Dense feed-forward networks with exact reverse-mode gradients, Adam and EMA.
//!
//! Everything is `f64`. A network is a chain of affine layers, each followed by
//! an element-wise activation; weights are row-major `(out, in)`.
//!
//! Gradients are stored in a value of the same type as the parameters (a
//! zeroed clone), so optimizers only need the [`Params`] view of a model.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Named, ordered view over every trainable tensor of a model.
///
/// `tensors` and `tensors_mut` must yield the same shapes in the same order;
/// optimizer state and gradient buffers are aligned by position.
pub trait Params {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    fn tensor_names(&self) -> Vec<String>;

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Row-major `(out_dim, in_dim)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite xavier limit");
        let mut layer = Self::zeros(in_dim, out_dim, activation);
        for w in &mut layer.weights {
            *w = dist.sample(rng);
        }
        layer
    }

    fn affine(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.bias))
        {
            *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

/// Intermediate values of one forward pass, consumed by [`Mlp::backward_into`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// `inputs[i]` is the input of layer `i`; the last entry is the network output.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("trace holds the network input")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("an Mlp needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::contract(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::contract(format!(
                    "layer {i} parameter lengths do not match {}x{}",
                    l.out_dim, l.in_dim
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::contract(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    /// `dims = [in, h1, ..., out]`; hidden layers use `hidden`, the last layer is linear.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::contract("an Mlp needs at least input and output dims"));
        }
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let act = if i + 1 == n { Activation::Identity } else { hidden };
                Layer::xavier(d[0], d[1], act, rng)
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// `[in, h1, ..., out]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::contract(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        for layer in &self.layers {
            let mut next = vec![0.0; layer.out_dim];
            layer.affine(&cur, &mut next);
            for v in &mut next {
                *v = layer.activation.apply(*v);
            }
            cur = next;
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(input.to_vec());
        for layer in &self.layers {
            let mut z = vec![0.0; layer.out_dim];
            layer.affine(inputs.last().unwrap(), &mut z);
            let y = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            inputs.push(y);
        }
        Ok(Trace { inputs, pre })
    }

    /// Accumulates d(output · upstream)/dθ into `grads` and returns the input gradient.
    pub fn backward_into(&self, trace: &Trace, upstream: &[f64], grads: &mut Mlp) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::contract(format!(
                "upstream gradient has {} entries, network outputs {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if grads.dims() != self.dims() {
            return Err(Error::contract("gradient buffer shape does not match network"));
        }
        let mut delta = upstream.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre[i];
            let y = &trace.inputs[i + 1];
            for (d, (&zj, &yj)) in delta.iter_mut().zip(z.iter().zip(y)) {
                *d *= layer.activation.derivative(zj, yj);
            }
            let x = &trace.inputs[i];
            let g = &mut grads.layers[i];
            for (o, &d) in delta.iter().enumerate() {
                g.bias[o] += d;
                if d != 0.0 {
                    let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (w, &xv) in row.iter_mut().zip(x) {
                        *w += d * xv;
                    }
                }
            }
            let mut prev = vec![0.0; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Gradient of `output · upstream` for one input: returns (parameter grads, input grad).
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(Mlp, Vec<f64>)> {
        let trace = self.forward_trace(input)?;
        let mut grads = self.zeros_like();
        let dx = self.backward_into(&trace, upstream, &mut grads)?;
        Ok((grads, dx))
    }

    pub fn zeros_like(&self) -> Mlp {
        let mut g = self.clone();
        g.zero();
        g
    }
}

/// Forward values of a batch, rows stacked row-major.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    rows: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl BatchTrace {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `rows x output_dim` network outputs.
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("trace holds the network input")
    }
}

/// `c = beta c + a b` for row-major matrices given by their strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let span = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs + 1;
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    fn check_batch(&self, input: &[f64], rows: usize) -> Result<()> {
        if input.len() != rows * self.input_dim() {
            return Err(Error::contract(format!(
                "batch of {rows} rows needs {} inputs, got {}",
                rows * self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    fn layer_batch(layer: &Layer, x: &[f64], rows: usize) -> Vec<f64> {
        let mut z = Vec::with_capacity(rows * layer.out_dim);
        for _ in 0..rows {
            z.extend_from_slice(&layer.bias);
        }
        // z (rows x out) += x (rows x in) * W^T.
        gemm(rows, layer.in_dim, layer.out_dim, x, (layer.in_dim, 1), &layer.weights, (1, layer.in_dim), 1.0, &mut z);
        z
    }

    /// Forward pass over `rows` stacked inputs.
    pub fn forward_batch(&self, input: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.check_batch(input, rows)?;
        let mut cur = input.to_vec();
        for layer in &self.layers {
            let mut z = Self::layer_batch(layer, &cur, rows);
            if layer.activation != Activation::Identity {
                for v in &mut z {
                    *v = layer.activation.apply(*v);
                }
            }
            cur = z;
        }
        Ok(cur)
    }

    pub fn forward_batch_trace(&self, input: &[f64], rows: usize) -> Result<BatchTrace> {
        self.check_batch(input, rows)?;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(input.to_vec());
        for layer in &self.layers {
            let z = Self::layer_batch(layer, inputs.last().unwrap(), rows);
            let y = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            inputs.push(y);
        }
        Ok(BatchTrace { rows, inputs, pre })
    }

    /// Batched [`Mlp::backward_into`]: accumulates the gradient of
    /// `sum_r output_r . upstream_r` and returns the `rows x input_dim` input gradient.
    pub fn backward_batch_into(&self, trace: &BatchTrace, upstream: &[f64], grads: &mut Mlp) -> Result<Vec<f64>> {
        let rows = trace.rows;
        if upstream.len() != rows * self.output_dim() {
            return Err(Error::contract("upstream gradient does not match the batch output"));
        }
        if grads.dims() != self.dims() {
            return Err(Error::contract("gradient buffer shape does not match network"));
        }
        let mut delta = upstream.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation != Activation::Identity {
                for (d, (&z, &y)) in delta.iter_mut().zip(trace.pre[i].iter().zip(&trace.inputs[i + 1])) {
                    *d *= layer.activation.derivative(z, y);
                }
            }
            let x = &trace.inputs[i];
            let (n_in, n_out) = (layer.in_dim, layer.out_dim);
            let g = &mut grads.layers[i];
            for row in delta.chunks_exact(n_out) {
                for (b, d) in g.bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            // dW (out x in) += delta^T (out x rows) * x (rows x in).
            gemm(n_out, rows, n_in, &delta, (1, n_out), x, (n_in, 1), 1.0, &mut g.weights);
            // dx (rows x in) = delta (rows x out) * W (out x in).
            let mut prev = vec![0.0; rows * n_in];
            gemm(rows, n_out, n_in, &delta, (n_out, 1), &layer.weights, (n_in, 1), 0.0, &mut prev);
            delta = prev;
        }
        Ok(delta)
    }
}

impl Params for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    fn tensor_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }
}

fn check_aligned<P: Params>(a: &P, b: &P, what: &str) -> Result<()> {
    let (ta, tb) = (a.tensors(), b.tensors());
    if ta.len() != tb.len() || ta.iter().zip(&tb).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::contract(format!("{what}: parameter shapes differ")));
    }
    Ok(())
}

/// Euclidean norm over all tensors.
pub fn global_norm<P: Params>(p: &P) -> f64 {
    p.tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.99;
    pub const EPS: f64 = 1e-8;
    pub const LEARNING_RATE: f64 = 1e-4;

    pub fn new<P: Params>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global norm of the gradient that entered the update.
    pub applied_norm: f64,
}

/// One bias-corrected Adam update after global-norm clipping.
pub fn adam_step<P: Params>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    lr: f64,
    clip_norm: f64,
) -> Result<StepStats> {
    if !(lr > 0.0) {
        return Err(Error::contract(format!("learning rate must be > 0, got {lr}")));
    }
    if !(clip_norm > 0.0) {
        return Err(Error::contract(format!("clip norm must be > 0, got {clip_norm}")));
    }
    check_aligned(params, grads, "adam_step")?;
    let gt = grads.tensors();
    if state.first_moment.len() != gt.len()
        || state.first_moment.iter().zip(&gt).any(|(m, g)| m.len() != g.len())
    {
        return Err(Error::contract("adam_step: optimizer state does not match parameters"));
    }
    for (name, g) in grads.tensor_names().iter().zip(&gt) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let grad_norm = global_norm(grads);
    let scale = if grad_norm > clip_norm { clip_norm / grad_norm } else { 1.0 };

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut applied_sq = 0.0;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(gt)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for i in 0..p.len() {
            let gi = g[i] * scale;
            applied_sq += gi * gi;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(StepStats {
        grad_norm,
        applied_norm: applied_sq.sqrt(),
    })
}

/// `target <- decay * target + (1 - decay) * source`, element-wise.
pub fn ema_update<P: Params>(target: &mut P, source: &P, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::contract(format!("EMA decay must lie in [0, 1], got {decay}")));
    }
    check_aligned(target, source, "ema_update")?;
    for (t, s) in target.tensors_mut().into_iter().zip(source.tensors()) {
        for (a, &b) in t.iter_mut().zip(s) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

/// Sum of `src` into `dst`, tensor by tensor.
pub fn accumulate<P: Params>(dst: &mut P, src: &P) -> Result<()> {
    check_aligned(dst, src, "accumulate")?;
    for (d, s) in dst.tensors_mut().into_iter().zip(src.tensors()) {
        for (a, &b) in d.iter_mut().zip(s) {
            *a += b;
        }
    }
    Ok(())
}

pub fn scale<P: Params>(p: &mut P, factor: f64) {
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v *= factor;
        }
    }
}

pub fn all_finite<P: Params>(p: &P) -> bool {
    p.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
}
