//! Dense feedforward classifier with exact per-example backpropagation.
//!
//! The network is a stack of affine layers with an activation between hidden
//! layers and a softmax on the final logits. Loss is cross-entropy against an
//! integer label. Everything is `f64`.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::seed;

/// Lower clamp applied to the target probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "tensor data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `out = self · x`. `x.len()` must equal `cols`.
    fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, x);
        }
    }

    /// `out = selfᵀ · v`.
    fn matvec_t_into(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&vi, row) in v.iter().zip(self.data.chunks_exact(self.cols)) {
            if vi != 0.0 {
                axpy(vi, row, out);
            }
        }
    }

    /// `self += alpha · u vᵀ`.
    fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        for (&ui, row) in u.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            let s = alpha * ui;
            if s != 0.0 {
                axpy(s, v, row);
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    HeNormal,
    GlorotUniform,
}

/// Architecture description: `layer_widths[0]` is the input dimension and the
/// last entry is the number of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub init: Init,
    /// When false every layer has an empty bias vector, so biases neither
    /// train nor contribute to gradient norms.
    pub bias: bool,
}

impl ModelSpec {
    pub fn mlp(layer_widths: Vec<usize>) -> Self {
        ModelSpec {
            layer_widths,
            activation: Activation::Relu,
            init: Init::HeNormal,
            bias: true,
        }
    }

    /// Single bias-free linear layer, `softmax(W x)`.
    pub fn linear_softmax(input_dim: usize, classes: usize) -> Self {
        ModelSpec {
            layer_widths: vec![input_dim, classes],
            activation: Activation::Identity,
            init: Init::HeNormal,
            bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 layer widths, got {}",
                self.layer_widths.len()
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidSpec("layer widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_out × fan_in`.
    pub weight: Tensor2,
    /// Length `fan_out`, or empty for a bias-free layer.
    pub bias: Vec<f64>,
}

/// Parameters of one model instance. Gradients share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl Params {
    /// Zero tensor with the same shapes as `self`.
    pub fn zeros_like(&self) -> Params {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Tensor2::zeros(l.weight.rows, l.weight.cols),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data.len() + l.bias.len())
            .sum()
    }

    /// All entries, weights then bias, layer by layer.
    pub fn iter_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data.iter().chain(l.bias.iter()).copied())
    }

    pub fn iter_flat_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.data.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn fill_zero(&mut self) {
        self.iter_flat_mut().for_each(|v| *v = 0.0);
    }

    /// `self += alpha · other`; shapes must match.
    pub fn add_scaled(&mut self, alpha: f64, other: &Params) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(alpha, &b.weight.data, &mut a.weight.data);
            axpy(alpha, &b.bias, &mut a.bias);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter_flat().all(f64::is_finite)
    }
}

pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<Params> {
    spec.validate()?;
    let mut rng = seed::rng(seed);
    let layers = spec
        .layer_widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let data: Vec<f64> = match spec.init {
                Init::HeNormal => {
                    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .expect("positive std");
                    (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::GlorotUniform => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new(-limit, limit).expect("non-empty range");
                    (0..fan_in * fan_out).map(|_| rng.sample(dist)).collect()
                }
            };
            Layer {
                weight: Tensor2 {
                    rows: fan_out,
                    cols: fan_in,
                    data,
                },
                bias: if spec.bias { vec![0.0; fan_out] } else { Vec::new() },
            }
        })
        .collect();
    Ok(Params {
        layers,
        activation: spec.activation,
    })
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn check_input(params: &Params, x: &[f64]) -> Result<()> {
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "input vector",
            expected: params.input_dim(),
            got: x.len(),
        });
    }
    Ok(())
}

fn check_class(params: &Params, y: usize) -> Result<()> {
    let classes = params.num_classes();
    if y >= classes {
        return Err(Error::ClassOutOfRange { class: y, classes });
    }
    Ok(())
}

/// Activations recorded during a forward pass, reusable across examples.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `pre[l]`: pre-activation output of layer `l`.
    pre: Vec<Vec<f64>>,
    /// `post[l]`: input to layer `l` (`post[0]` is `x`).
    post: Vec<Vec<f64>>,
    probs: Vec<f64>,
    delta: Vec<Vec<f64>>,
}

impl Trace {
    pub fn new(params: &Params) -> Self {
        let outs: Vec<usize> = params.layers.iter().map(|l| l.weight.rows).collect();
        let ins: Vec<usize> = params.layers.iter().map(|l| l.weight.cols).collect();
        Trace {
            pre: outs.iter().map(|&n| vec![0.0; n]).collect(),
            post: ins.iter().map(|&n| vec![0.0; n]).collect(),
            probs: vec![0.0; params.num_classes()],
            delta: outs.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Runs the network on `x`, leaving logits and probabilities in the trace.
    pub fn forward(&mut self, params: &Params, x: &[f64]) -> Result<()> {
        check_input(params, x)?;
        self.post[0].copy_from_slice(x);
        let last = params.layers.len() - 1;
        for (l, layer) in params.layers.iter().enumerate() {
            let (pre, post) = (&mut self.pre[l], &self.post[l]);
            layer.weight.matvec_into(post, pre);
            for (p, b) in pre.iter_mut().zip(&layer.bias) {
                *p += b;
            }
            if l < last {
                let next = &mut self.post[l + 1];
                match params.activation {
                    Activation::Relu => {
                        for (n, &p) in next.iter_mut().zip(pre.iter()) {
                            *n = p.max(0.0);
                        }
                    }
                    Activation::Identity => next.copy_from_slice(pre),
                }
            }
        }
        self.probs.copy_from_slice(self.pre[last].as_slice());
        softmax_in_place(&mut self.probs);
        Ok(())
    }

    /// Back-propagates `probs - onehot(y)` through the last forward pass,
    /// filling the per-layer error signals.
    fn backprop_deltas(&mut self, params: &Params, y: usize) {
        let last = params.layers.len() - 1;
        self.delta[last].copy_from_slice(&self.probs);
        self.delta[last][y] -= 1.0;
        for l in (1..=last).rev() {
            let (lower, upper) = self.delta.split_at_mut(l);
            let below = &mut lower[l - 1];
            params.layers[l].weight.matvec_t_into(&upper[0], below);
            if params.activation == Activation::Relu {
                for (d, &z) in below.iter_mut().zip(&self.pre[l - 1]) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
    }

    /// Forward + backward for one example, adding `scale · ∇θ L` into `grad`.
    /// Returns the loss.
    pub fn accumulate_gradient(
        &mut self,
        params: &Params,
        x: &[f64],
        y: usize,
        scale: f64,
        grad: &mut Params,
    ) -> Result<f64> {
        check_class(params, y)?;
        self.forward(params, x)?;
        self.backprop_deltas(params, y);
        for (l, g) in grad.layers.iter_mut().enumerate() {
            g.weight.add_outer(scale, &self.delta[l], &self.post[l]);
            axpy(scale, &self.delta[l], &mut g.bias);
        }
        Ok(cross_entropy_unchecked(&self.probs, y))
    }

    /// `‖∇θ L(x, y)‖₂` without materializing the gradient.
    ///
    /// Each weight gradient is the outer product `δ aᵀ`, whose Frobenius norm
    /// is `‖δ‖·‖a‖`; the bias gradient is `δ` itself.
    pub fn grad_norm(&mut self, params: &Params, x: &[f64], y: usize) -> Result<f64> {
        check_class(params, y)?;
        self.forward(params, x)?;
        self.backprop_deltas(params, y);
        let total: f64 = params
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let d2 = sq_norm(&self.delta[l]);
                let bias_term = if layer.bias.is_empty() { 0.0 } else { 1.0 };
                d2 * (sq_norm(&self.post[l]) + bias_term)
            })
            .sum();
        Ok(total.sqrt())
    }
}

pub fn forward(params: &Params, x: &[f64]) -> Result<Output> {
    let mut trace = Trace::new(params);
    trace.forward(params, x)?;
    Ok(Output {
        logits: trace.logits().to_vec(),
        probs: trace.probs,
    })
}

fn cross_entropy_unchecked(probs: &[f64], y: usize) -> f64 {
    -probs[y].max(PROB_FLOOR).ln()
}

/// `-ln p_y`, with `p_y` clamped below at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], y: usize) -> Result<f64> {
    if y >= probs.len() {
        return Err(Error::ClassOutOfRange {
            class: y,
            classes: probs.len(),
        });
    }
    Ok(cross_entropy_unchecked(probs, y))
}

/// Exact gradient of `cross_entropy(forward(params, x).probs, y)` with respect
/// to every weight and bias.
pub fn backward_per_example(params: &Params, x: &[f64], y: usize) -> Result<Params> {
    let mut grad = params.zeros_like();
    Trace::new(params).accumulate_gradient(params, x, y, 1.0, &mut grad)?;
    Ok(grad)
}

/// Euclidean norm of the concatenation of every tensor in `grad`.
pub fn flat_l2_norm(grad: &Params) -> f64 {
    grad.iter_flat().map(|v| v * v).sum::<f64>().sqrt()
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate().skip(1) {
        if p > v[best] {
            best = i;
        }
    }
    best
}
