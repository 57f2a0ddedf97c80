// SPDX-License-Identifier: Apache-2.0

//! Dense feed-forward networks trained by mini-batch SGD with momentum.
//!
//! A [`DenseNetwork`] owns its layers, a per-layer freeze mask and an
//! optional input [`Standardizer`]; the standardizer is fitted on the
//! training split the first time a network is trained and travels with the
//! network from then on (including its JSON form). Multi-segment models
//! (shared trunks with task heads, input adapters) are built by chaining
//! several networks through the crate-internal batch forward/backward API.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::util;

/// Momentum coefficient of the optimizer.
pub const MOMENTUM: f64 = 0.9;

/// RNG stream of the per-epoch row shuffle.
pub(crate) const SHUFFLE_STREAM: u64 = 0x600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

/// Per-feature z-score transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit on rows of equal length. Constant columns get unit scale.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::EmptyRequest("cannot fit a standardizer on zero rows".into()))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                let c = r[j] - mean[j];
                var[j] += c * c;
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn destandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Affine map followed by an elementwise activation. Weights are row-major
/// `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetwork {
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<Layer>,
    pub freeze_mask: Vec<bool>,
    pub seed: u64,
    #[serde(default)]
    pub standardizer: Option<Standardizer>,
}

/// Build a network with dimensions `layer_dims[0] → … → layer_dims[n]`.
///
/// Weights are drawn uniformly from `±sqrt(3 / fan_in)` (`±sqrt(6 / fan_in)`
/// ahead of ReLU), biases start at zero.
pub fn init_network(layer_dims: &[usize], activations: &[Activation], seed: u64) -> Result<DenseNetwork> {
    if layer_dims.len() < 2 {
        return Err(Error::validation("layer_dims", "need at least an input and an output dimension"));
    }
    if activations.len() != layer_dims.len() - 1 {
        return Err(Error::validation(
            "activations",
            format!(
                "expected {} activations for {} layer dims, got {}",
                layer_dims.len() - 1,
                layer_dims.len(),
                activations.len()
            ),
        ));
    }
    if layer_dims.iter().any(|d| *d == 0) {
        return Err(Error::validation("layer_dims", "dimensions must be positive"));
    }
    let mut rng = util::rng(seed, 0x500);
    let layers = layer_dims
        .windows(2)
        .zip(activations)
        .map(|(w, act)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let gain = if *act == Activation::Relu { 6.0 } else { 3.0 };
            let limit = (gain / fan_in as f64).sqrt();
            Layer {
                in_dim: fan_in,
                out_dim: fan_out,
                activation: *act,
                weights: (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect(),
                bias: vec![0.0; fan_out],
            }
        })
        .collect::<Vec<_>>();
    Ok(DenseNetwork {
        input_dim: layer_dims[0],
        output_dim: *layer_dims.last().unwrap(),
        freeze_mask: vec![false; layers.len()],
        layers,
        seed,
        standardizer: None,
    })
}

/// Hyper-parameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    /// Fraction of the (chronologically last) rows held out for early
    /// stopping. Zero disables validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.01,
            l2: 0.0,
            seed: 0,
            early_stop_patience: 10,
            validation_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::validation("l2", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::validation("validation_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Mean training loss and (when a validation split exists) validation loss
/// of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub train: f64,
    pub validation: Option<f64>,
}

/// Parameter gradients, laid out like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// Elementwise `self += other`.
    pub(crate) fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Activations of every layer for a batch; `acts[0]` is the (standardized)
/// input, `acts[l + 1]` the output of layer `l`. Row-major `rows × dim`.
#[derive(Debug, Clone)]
pub(crate) struct BatchTrace {
    pub rows: usize,
    pub acts: Vec<Vec<f64>>,
}

impl BatchTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

impl DenseNetwork {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn set_freeze_mask(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.layers.len() {
            return Err(Error::validation(
                "freeze_mask",
                format!("expected {} entries, got {}", self.layers.len(), mask.len()),
            ));
        }
        self.freeze_mask = mask.to_vec();
        Ok(())
    }

    /// Structural checks: chained dimensions, mask length, finite weights.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::validation("layers", "network has no layers"));
        }
        if self.freeze_mask.len() != self.layers.len() {
            return Err(Error::validation("freeze_mask", "length differs from layer count"));
        }
        let mut d = self.input_dim;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim != d || l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::validation(format!("layers[{i}]"), "dimensions do not chain"));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("layers[{i}]"), "non-finite parameter"));
            }
            d = l.out_dim;
        }
        if d != self.output_dim {
            return Err(Error::validation("output_dim", "does not match last layer"));
        }
        if let Some(s) = &self.standardizer {
            if s.dim() != self.input_dim || s.std.len() != s.mean.len() {
                return Err(Error::validation("standardizer", "dimension mismatch"));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::validation(
                "x",
                format!("expected {} inputs, got {}", self.input_dim, x.len()),
            ));
        }
        Ok(())
    }

    fn standardized(&self, x: &[f64]) -> Vec<f64> {
        match &self.standardizer {
            Some(s) => s.standardize(x),
            None => x.to_vec(),
        }
    }

    /// Layer-wise affine map and activation.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let trace = self.forward_batch_std(&self.standardized(x), 1);
        Ok(trace.output().to_vec())
    }

    /// First output for each row of `xs`.
    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(256) {
            for x in chunk {
                self.check_input(x)?;
            }
            let flat = self.standardize_rows(chunk);
            let trace = self.forward_batch_std(&flat, chunk.len());
            out.extend(trace.output().chunks(self.output_dim).map(|r| r[0]));
        }
        Ok(out)
    }

    /// First-output predictions for every record of `dataset`.
    pub fn predict_dataset(&self, dataset: &TimeSeriesDataset) -> Result<Vec<f64>> {
        self.predict_many(&dataset.model_inputs())
    }

    pub(crate) fn standardize_rows(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        let mut flat = Vec::with_capacity(rows.len() * self.input_dim);
        for r in rows {
            match &self.standardizer {
                Some(s) => flat.extend(s.standardize(r)),
                None => flat.extend_from_slice(r),
            }
        }
        flat
    }

    /// Batch forward on already standardized rows.
    pub(crate) fn forward_batch_std(&self, x: &[f64], rows: usize) -> BatchTrace {
        debug_assert_eq!(x.len(), rows * self.input_dim);
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let input = acts.last().unwrap();
            let mut out = vec![0.0; rows * layer.out_dim];
            for r in 0..rows {
                let xr = &input[r * layer.in_dim..(r + 1) * layer.in_dim];
                let orow = &mut out[r * layer.out_dim..(r + 1) * layer.out_dim];
                for (o, slot) in orow.iter_mut().enumerate() {
                    let w = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    let z = layer.bias[o] + w.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    *slot = layer.activation.apply(z);
                }
            }
            acts.push(out);
        }
        BatchTrace { rows, acts }
    }

    /// Backpropagate `d_out` (gradient of the loss w.r.t. the network output,
    /// `rows × output_dim`). Returns the parameter gradients and, when
    /// `need_input_grad`, the gradient w.r.t. the standardized input.
    pub(crate) fn backward_batch(
        &self,
        trace: &BatchTrace,
        d_out: &[f64],
        need_input_grad: bool,
    ) -> (Gradients, Option<Vec<f64>>) {
        let rows = trace.rows;
        let mut grads = Gradients::zeros_like(self);
        let mut delta = d_out.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let a_out = &trace.acts[li + 1];
            let a_in = &trace.acts[li];
            for (d, a) in delta.iter_mut().zip(a_out) {
                *d *= layer.activation.derivative_from_output(*a);
            }
            let gw = &mut grads.weights[li];
            let gb = &mut grads.bias[li];
            for r in 0..rows {
                let dz = &delta[r * layer.out_dim..(r + 1) * layer.out_dim];
                let xr = &a_in[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (o, &d) in dz.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (g, x) in row.iter_mut().zip(xr) {
                        *g += d * x;
                    }
                }
            }
            if li == 0 && !need_input_grad {
                return (grads, None);
            }
            let mut d_in = vec![0.0; rows * layer.in_dim];
            for r in 0..rows {
                let dz = &delta[r * layer.out_dim..(r + 1) * layer.out_dim];
                let di = &mut d_in[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (o, &d) in dz.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let w = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (g, wv) in di.iter_mut().zip(w) {
                        *g += d * wv;
                    }
                }
            }
            delta = d_in;
        }
        (grads, Some(delta))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: DenseNetwork = serde_json::from_str(s)?;
        net.validate()?;
        Ok(net)
    }
}

/// Momentum buffers for one network.
#[derive(Debug, Clone)]
pub(crate) struct Momentum {
    velocity: Gradients,
}

impl Momentum {
    pub fn new(net: &DenseNetwork) -> Self {
        Self {
            velocity: Gradients::zeros_like(net),
        }
    }

    /// One SGD-with-momentum step on every unfrozen layer. L2 applies to
    /// weights only.
    pub fn step(&mut self, net: &mut DenseNetwork, grads: &Gradients, lr: f64, l2: f64) {
        for (li, layer) in net.layers.iter_mut().enumerate() {
            if net.freeze_mask[li] {
                continue;
            }
            let vw = &mut self.velocity.weights[li];
            for ((w, v), g) in layer.weights.iter_mut().zip(vw.iter_mut()).zip(&grads.weights[li]) {
                *v = MOMENTUM * *v - lr * (g + l2 * *w);
                *w += *v;
            }
            let vb = &mut self.velocity.bias[li];
            for ((b, v), g) in layer.bias.iter_mut().zip(vb.iter_mut()).zip(&grads.bias[li]) {
                *v = MOMENTUM * *v - lr * g;
                *b += *v;
            }
        }
    }
}

/// Weighted squared error of a batch and its gradient w.r.t. the output.
/// Loss is `Σ_r w_r Σ_o (ŷ − y)² / (Σ_r w_r · out_dim)`.
pub(crate) fn mse_loss_grad(pred: &[f64], target: &[f64], weights: Option<&[f64]>, out_dim: usize) -> (f64, Vec<f64>) {
    let rows = pred.len() / out_dim;
    let wsum: f64 = match weights {
        Some(w) => w.iter().sum(),
        None => rows as f64,
    };
    let norm = wsum * out_dim as f64;
    if norm <= 0.0 {
        return (0.0, vec![0.0; pred.len()]);
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for r in 0..rows {
        let w = weights.map_or(1.0, |w| w[r]);
        for o in 0..out_dim {
            let i = r * out_dim + o;
            let e = pred[i] - target[i];
            loss += w * e * e;
            grad[i] = 2.0 * w * e / norm;
        }
    }
    (loss / norm, grad)
}

/// Rows, targets and optional sample weights for supervised training.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub x: &'a [Vec<f64>],
    pub y: &'a [Vec<f64>],
    pub weights: Option<&'a [f64]>,
}

impl<'a> Samples<'a> {
    pub fn new(x: &'a [Vec<f64>], y: &'a [Vec<f64>]) -> Self {
        Self { x, y, weights: None }
    }

    pub fn weighted(x: &'a [Vec<f64>], y: &'a [Vec<f64>], weights: &'a [f64]) -> Self {
        Self {
            x,
            y,
            weights: Some(weights),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Split sizes for a chronological hold-out of `fraction` of `n` rows.
pub(crate) fn split_sizes(n: usize, fraction: f64) -> (usize, usize) {
    if fraction <= 0.0 || n < 2 {
        return (n, 0);
    }
    let n_val = ((n as f64) * fraction).round().clamp(1.0, (n - 1) as f64) as usize;
    (n - n_val, n_val)
}

pub(crate) fn evaluate_loss(net: &DenseNetwork, x_std: &[f64], y: &[f64], w: Option<&[f64]>, rows: usize) -> f64 {
    if rows == 0 {
        return 0.0;
    }
    let trace = net.forward_batch_std(x_std, rows);
    mse_loss_grad(trace.output(), y, w, net.output_dim).0
}

fn check_samples(net: &DenseNetwork, samples: &Samples<'_>, path: &str) -> Result<()> {
    if samples.y.len() != samples.len() || samples.weights.is_some_and(|w| w.len() != samples.len()) {
        return Err(Error::validation(path, "x, y and weights must have equal length"));
    }
    for (i, (x, y)) in samples.x.iter().zip(samples.y).enumerate() {
        if x.len() != net.input_dim || y.len() != net.output_dim {
            return Err(Error::validation(format!("{path}[{i}]"), "dimension mismatch"));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("{path}[{i}]"), "non-finite value"));
        }
    }
    if let Some(w) = samples.weights {
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::validation(format!("{path}.weights"), "weights must be finite and non-negative"));
        }
    }
    Ok(())
}

/// Train on explicit rows, holding out the chronologically last
/// `cfg.validation_fraction` of them for early stopping. Fits the input
/// standardizer on the training split when the network has none. Returns
/// the best network by validation loss (or the final one without
/// validation) and the per-epoch history.
pub fn train_samples(
    net: &DenseNetwork,
    samples: Samples<'_>,
    cfg: &TrainConfig,
) -> Result<(DenseNetwork, Vec<EpochLoss>)> {
    let (n_train, _) = split_sizes(samples.len(), cfg.validation_fraction);
    let head = Samples {
        x: &samples.x[..n_train],
        y: &samples.y[..n_train.min(samples.y.len())],
        weights: samples.weights.map(|w| &w[..n_train.min(w.len())]),
    };
    let tail = Samples {
        x: &samples.x[n_train..],
        y: &samples.y[n_train.min(samples.y.len())..],
        weights: samples.weights.map(|w| &w[n_train.min(w.len())..]),
    };
    check_samples(net, &samples, "samples")?;
    train_with_validation(net, head, (!tail.is_empty()).then_some(tail), cfg)
}

/// Train on `train`, early-stopping on `validation` when given.
pub fn train_with_validation(
    net: &DenseNetwork,
    train: Samples<'_>,
    validation: Option<Samples<'_>>,
    cfg: &TrainConfig,
) -> Result<(DenseNetwork, Vec<EpochLoss>)> {
    cfg.validate()?;
    net.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyRequest("training set is empty".into()));
    }
    check_samples(net, &train, "train")?;
    if let Some(v) = &validation {
        check_samples(net, v, "validation")?;
    }
    // A validation split that carries no weight cannot rank epochs.
    let validation = validation.filter(|v| !v.is_empty() && v.weights.map_or(true, |w| w.iter().sum::<f64>() > 0.0));

    let mut net = net.clone();
    if net.standardizer.is_none() {
        net.standardizer = Some(Standardizer::fit(train.x)?);
    }
    let (din, dout) = (net.input_dim, net.output_dim);
    let x_std = net.standardize_rows(train.x);
    let y_flat: Vec<f64> = train.y.iter().flatten().copied().collect();
    let val = validation.map(|v| {
        (
            net.standardize_rows(v.x),
            v.y.iter().flatten().copied().collect::<Vec<f64>>(),
            v.weights,
            v.len(),
        )
    });
    let val_loss = |net: &DenseNetwork| val.as_ref().map(|(x, y, w, n)| evaluate_loss(net, x, y, *w, *n));

    let n_train = train.len();
    let mut momentum = Momentum::new(&net);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, DenseNetwork)> = val_loss(&net).map(|v| (v, net.clone()));
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut rng = util::rng(cfg.seed, SHUFFLE_STREAM);
    let all_frozen = net.freeze_mask.iter().all(|f| *f);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_weight = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let rows = batch.len();
            let mut bx = Vec::with_capacity(rows * din);
            let mut by = Vec::with_capacity(rows * dout);
            let mut bw = Vec::with_capacity(rows);
            for &i in batch {
                bx.extend_from_slice(&x_std[i * din..(i + 1) * din]);
                by.extend_from_slice(&y_flat[i * dout..(i + 1) * dout]);
                bw.push(train.weights.map_or(1.0, |w| w[i]));
            }
            let trace = net.forward_batch_std(&bx, rows);
            let weights = train.weights.map(|_| bw.as_slice());
            let (loss, d_out) = mse_loss_grad(trace.output(), &by, weights, dout);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}")));
            }
            let bw_sum: f64 = bw.iter().sum();
            epoch_loss += loss * bw_sum;
            epoch_weight += bw_sum;
            if all_frozen {
                continue;
            }
            let (grads, _) = net.backward_batch(&trace, &d_out, false);
            momentum.step(&mut net, &grads, cfg.learning_rate, cfg.l2);
        }
        let train_loss = if epoch_weight > 0.0 { epoch_loss / epoch_weight } else { 0.0 };
        let validation = val_loss(&net);
        if validation.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("non-finite validation loss at epoch {epoch}")));
        }
        history.push(EpochLoss {
            train: train_loss,
            validation,
        });
        if let (Some(v), Some((best_v, best_net))) = (validation, best.as_mut()) {
            if v < *best_v {
                *best_v = v;
                *best_net = net.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }
    let out = match best {
        Some((_, b)) => b,
        None => net,
    };
    Ok((out, history))
}

/// Train a single-output network on the labeled records of `data`.
pub fn train(net: &DenseNetwork, data: &TimeSeriesDataset, cfg: &TrainConfig) -> Result<(DenseNetwork, Vec<EpochLoss>)> {
    train_weighted(net, data, None, cfg)
}

/// As [`train`], with an optional per-record loss weight aligned with the
/// labeled records of `data`.
pub fn train_weighted(
    net: &DenseNetwork,
    data: &TimeSeriesDataset,
    weights: Option<&[f64]>,
    cfg: &TrainConfig,
) -> Result<(DenseNetwork, Vec<EpochLoss>)> {
    if !data.is_labeled() {
        return Err(Error::validation("data.power", "training requires labels"));
    }
    let (x, y) = data.labeled_xy();
    if x.is_empty() {
        return Err(Error::EmptyRequest("dataset has no labeled records".into()));
    }
    let y: Vec<Vec<f64>> = y.into_iter().map(|v| vec![v]).collect();
    let samples = Samples { x: &x, y: &y, weights };
    train_samples(net, samples, cfg)
}

/// Continue training with `freeze` installed; frozen layers come back
/// bitwise unchanged and the original freeze mask is restored.
pub fn finetune(net: &DenseNetwork, data: &TimeSeriesDataset, freeze: &[bool], cfg: &TrainConfig) -> Result<DenseNetwork> {
    let mut staged = net.clone();
    staged.set_freeze_mask(freeze)?;
    let (mut tuned, _) = train(&staged, data, cfg)?;
    tuned.freeze_mask = net.freeze_mask.clone();
    Ok(tuned)
}

/// Analytic gradient of the squared-error loss on one sample.
pub fn sample_gradients(net: &DenseNetwork, x: &[f64], y: &[f64]) -> Result<Gradients> {
    net.check_input(x)?;
    if y.len() != net.output_dim {
        return Err(Error::validation("y", "dimension mismatch"));
    }
    let trace = net.forward_batch_std(&net.standardized(x), 1);
    let (_, d_out) = mse_loss_grad(trace.output(), y, None, net.output_dim);
    Ok(net.backward_batch(&trace, &d_out, false).0)
}

fn sample_loss(net: &DenseNetwork, x: &[f64], y: &[f64]) -> f64 {
    let trace = net.forward_batch_std(&net.standardized(x), 1);
    mse_loss_grad(trace.output(), y, None, net.output_dim).0
}

/// Compare `analytic` against central finite differences over every
/// unfrozen parameter; returns `max |g_a − g_n| / max(|g_a| + |g_n|, 1e-12)`.
pub fn grad_check_against(net: &DenseNetwork, sample: (&[f64], &[f64]), epsilon: f64, analytic: &Gradients) -> f64 {
    let (x, y) = sample;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    let rel = |ga: f64, gn: f64| (ga - gn).abs() / (ga.abs() + gn.abs()).max(1e-12);
    for li in 0..net.layers.len() {
        if net.freeze_mask[li] {
            continue;
        }
        for k in 0..net.layers[li].weights.len() {
            let orig = probe.layers[li].weights[k];
            probe.layers[li].weights[k] = orig + epsilon;
            let lp = sample_loss(&probe, x, y);
            probe.layers[li].weights[k] = orig - epsilon;
            let lm = sample_loss(&probe, x, y);
            probe.layers[li].weights[k] = orig;
            worst = worst.max(rel(analytic.weights[li][k], (lp - lm) / (2.0 * epsilon)));
        }
        for k in 0..net.layers[li].bias.len() {
            let orig = probe.layers[li].bias[k];
            probe.layers[li].bias[k] = orig + epsilon;
            let lp = sample_loss(&probe, x, y);
            probe.layers[li].bias[k] = orig - epsilon;
            let lm = sample_loss(&probe, x, y);
            probe.layers[li].bias[k] = orig;
            worst = worst.max(rel(analytic.bias[li][k], (lp - lm) / (2.0 * epsilon)));
        }
    }
    worst
}

/// Maximum relative error between backprop and central finite differences.
pub fn grad_check(net: &DenseNetwork, sample: (&[f64], &[f64]), epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::validation("epsilon", "must be positive"));
    }
    let analytic = sample_gradients(net, sample.0, sample.1)?;
    Ok(grad_check_against(net, sample, epsilon, &analytic))
}

/// Architecture of an autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderSpec {
    pub code_dim: usize,
    /// Hidden widths between input and code; mirrored in the decoder.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl AutoencoderSpec {
    pub fn linear(code_dim: usize) -> Self {
        Self {
            code_dim,
            hidden: Vec::new(),
            activation: Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub encoder: DenseNetwork,
    pub decoder: DenseNetwork,
    /// Reconstruction MSE in standardized units over all rows.
    pub reconstruction_mse: f64,
}

/// Train encoder and decoder jointly to reconstruct standardized `features`.
/// The encoder carries the fitted standardizer, so it consumes raw rows.
pub fn train_autoencoder(features: &[Vec<f64>], spec: &AutoencoderSpec, cfg: &TrainConfig) -> Result<Autoencoder> {
    let input_dim = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::EmptyRequest("no rows for the autoencoder".into()))?;
    if spec.code_dim == 0 || spec.code_dim >= input_dim {
        return Err(Error::validation(
            "code_dim",
            format!("must lie in [1, {input_dim}), got {}", spec.code_dim),
        ));
    }
    let (n_train, _) = split_sizes(features.len(), cfg.validation_fraction);
    let scaler = Standardizer::fit(&features[..n_train])?;
    let targets: Vec<Vec<f64>> = features.iter().map(|r| scaler.standardize(r)).collect();

    let mut dims = vec![input_dim];
    dims.extend(&spec.hidden);
    dims.push(spec.code_dim);
    let enc_layers = dims.len() - 1;
    let mut full_dims = dims.clone();
    full_dims.extend(spec.hidden.iter().rev());
    full_dims.push(input_dim);
    let mut acts = vec![spec.activation; full_dims.len() - 2];
    acts.push(Activation::Identity);
    let mut joint = init_network(&full_dims, &acts, cfg.seed)?;
    joint.standardizer = Some(scaler);
    let (joint, _) = train_samples(&joint, Samples::new(features, &targets), cfg)?;

    let decoder_layers = joint.layers[enc_layers..].to_vec();
    let encoder = DenseNetwork {
        input_dim,
        output_dim: spec.code_dim,
        freeze_mask: vec![false; enc_layers],
        layers: joint.layers[..enc_layers].to_vec(),
        seed: cfg.seed,
        standardizer: joint.standardizer.clone(),
    };
    let decoder = DenseNetwork {
        input_dim: spec.code_dim,
        output_dim: input_dim,
        freeze_mask: vec![false; decoder_layers.len()],
        layers: decoder_layers,
        seed: cfg.seed,
        standardizer: None,
    };
    let x_std = joint.standardize_rows(features);
    let t_flat: Vec<f64> = targets.iter().flatten().copied().collect();
    let reconstruction_mse = evaluate_loss(&joint, &x_std, &t_flat, None, features.len());
    Ok(Autoencoder {
        encoder,
        decoder,
        reconstruction_mse,
    })
}

/// Code vector of `x` under `encoder`.
pub fn encode(encoder: &DenseNetwork, x: &[f64]) -> Result<Vec<f64>> {
    encoder.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_by_one(w: f64, b: f64) -> DenseNetwork {
        let mut net = init_network(&[1, 1], &[Activation::Identity], 0).unwrap();
        net.layers[0].weights = vec![w];
        net.layers[0].bias = vec![b];
        net
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a = init_network(&[3, 4, 1], &[Activation::Tanh, Activation::Identity], 0).unwrap();
        let b = init_network(&[3, 4, 1], &[Activation::Tanh, Activation::Identity], 0).unwrap();
        let c = init_network(&[3, 4, 1], &[Activation::Tanh, Activation::Identity], 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.layers, c.layers);
        assert!(a.freeze_mask.iter().all(|f| !f));
        let lin = init_network(&[3, 1], &[Activation::Identity], 5).unwrap();
        assert_eq!(lin.layer_count(), 1);
        assert_eq!(lin.output_dim, 1);
    }

    #[test]
    fn init_rejects_mismatched_activations() {
        assert!(init_network(&[3, 4, 1], &[Activation::Tanh], 0).is_err());
        assert!(init_network(&[3], &[], 0).is_err());
    }

    #[test]
    fn forward_by_hand() {
        assert_eq!(one_by_one(2.0, 1.0).forward(&[3.0]).unwrap(), vec![7.0]);
        let mut zero = init_network(&[3, 2], &[Activation::Identity], 0).unwrap();
        zero.layers[0].weights.iter_mut().for_each(|w| *w = 0.0);
        assert_eq!(zero.forward(&[1.0, -2.0, 5.0]).unwrap(), vec![0.0, 0.0]);
        let mut eye = init_network(&[2, 2], &[Activation::Identity], 0).unwrap();
        eye.layers[0].weights = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(eye.forward(&[0.3, -4.0]).unwrap(), vec![0.3, -4.0]);
        assert!(eye.forward(&[1.0]).is_err());
    }

    #[test]
    fn hand_gradient_of_linear_unit() {
        // L = (w x + b − y)², dL/dw = 2 e x, dL/db = 2 e.
        let net = one_by_one(0.5, 0.25);
        let g = sample_gradients(&net, &[2.0], &[3.0]).unwrap();
        let e = 0.5 * 2.0 + 0.25 - 3.0;
        assert!((g.weights[0][0] - 2.0 * e * 2.0).abs() < 1e-15);
        assert!((g.bias[0][0] - 2.0 * e).abs() < 1e-15);
        assert!(grad_check(&net, (&[2.0], &[3.0]), 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn grad_check_on_tanh_net() {
        let net = init_network(
            &[4, 6, 5, 2],
            &[Activation::Tanh, Activation::Tanh, Activation::Sigmoid],
            3,
        )
        .unwrap();
        let err = grad_check(&net, (&[0.3, -1.2, 0.8, 0.1], &[0.2, 0.9]), 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn frozen_gradients_are_ignored() {
        let mut net = init_network(&[3, 4, 1], &[Activation::Tanh, Activation::Identity], 9).unwrap();
        net.set_freeze_mask(&[true, false]).unwrap();
        let sample: (&[f64], &[f64]) = (&[0.1, 0.2, -0.4], &[1.0]);
        let clean = sample_gradients(&net, sample.0, sample.1).unwrap();
        let mut corrupt = clean.clone();
        corrupt.weights[0].iter_mut().for_each(|g| *g = 1e6);
        corrupt.bias[0].iter_mut().for_each(|g| *g = -1e6);
        assert_eq!(
            grad_check_against(&net, sample, 1e-5, &clean),
            grad_check_against(&net, sample, 1e-5, &corrupt)
        );
    }

    #[test]
    fn standardizer_round_trip() {
        let rows = vec![vec![1.0, 10.0, 5.0], vec![3.0, -10.0, 5.0], vec![2.0, 4.0, 5.0]];
        let s = Standardizer::fit(&rows).unwrap();
        for r in &rows {
            let back = s.destandardize(&s.standardize(r));
            for (a, b) in back.iter().zip(r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // constant column gets unit scale
        assert_eq!(s.std[2], 1.0);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut net = init_network(&[3, 5, 1], &[Activation::Relu, Activation::Sigmoid], 11).unwrap();
        net.standardizer = Some(Standardizer {
            mean: vec![0.1, 1.0 / 3.0, -7.25],
            std: vec![1.5, 2.0f64.sqrt(), 1e-3],
        });
        let back = DenseNetwork::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
        for (a, b) in back.layers.iter().zip(&net.layers) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn all_frozen_training_is_identity() {
        let x: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 50.0]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|v| vec![2.0 * v[0]]).collect();
        let mut net = one_by_one(0.3, 0.1);
        net.set_freeze_mask(&[true]).unwrap();
        let (out, _) = train_samples(&net, Samples::new(&x, &y), &TrainConfig::default()).unwrap();
        assert_eq!(out.layers, net.layers);
    }

    #[test]
    fn training_rejects_empty_and_nan() {
        let net = one_by_one(0.3, 0.1);
        let cfg = TrainConfig::default();
        assert!(train_samples(&net, Samples::new(&[], &[]), &cfg).is_err());
        let x = vec![vec![f64::NAN]];
        let y = vec![vec![1.0]];
        assert!(train_samples(&net, Samples::new(&x, &y), &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let x: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64 - 32.0]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|v| vec![1e3 * v[0]]).collect();
        let mut net = one_by_one(0.3, 0.1);
        net.standardizer = Some(Standardizer::identity(1));
        let cfg = TrainConfig {
            learning_rate: 10.0,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_samples(&net, Samples::new(&x, &y), &cfg),
            Err(Error::Diverged(_))
        ));
    }

    #[test]
    fn autoencoder_rejects_full_code() {
        let rows = vec![vec![1.0, 2.0, 3.0]; 10];
        let err = train_autoencoder(&rows, &AutoencoderSpec::linear(3), &TrainConfig::default());
        assert!(matches!(err, Err(Error::Validation { .. })));
    }

    #[test]
    fn encode_zero_encoder() {
        let mut enc = init_network(&[3, 2], &[Activation::Tanh], 1).unwrap();
        enc.layers[0].weights.iter_mut().for_each(|w| *w = 0.0);
        assert_eq!(encode(&enc, &[4.0, 5.0, 6.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn code_of_mean_input_is_bias_path() {
        // Standardized mean input is the zero vector, so the code is
        // tanh(W2 · tanh(b1) + b2).
        let mut enc = init_network(&[2, 2, 1], &[Activation::Tanh, Activation::Tanh], 4).unwrap();
        enc.standardizer = Some(Standardizer {
            mean: vec![3.0, -1.0],
            std: vec![2.0, 0.5],
        });
        enc.layers[0].bias = vec![0.2, -0.4];
        enc.layers[1].weights = vec![0.5, 1.5];
        enc.layers[1].bias = vec![0.1];
        let expected = (0.5 * 0.2f64.tanh() + 1.5 * (-0.4f64).tanh() + 0.1).tanh();
        let code = encode(&enc, &[3.0, -1.0]).unwrap();
        assert!((code[0] - expected).abs() < 1e-15);
    }
}
