//! Dense row-major matrices and a small ReLU multilayer perceptron trained
//! with hand-written backpropagation, SGD with momentum and weight decay,
//! and a cosine learning-rate schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {num_outputs} outputs")]
    Label { label: usize, num_outputs: usize },
    #[error("non-finite loss or gradient at epoch {epoch}, batch {batch}")]
    NumericFailure { epoch: usize, batch: usize },
    #[error("epoch {epoch} outside schedule range [0, {epochs})")]
    Range { epoch: usize, epochs: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Stack equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Image shape of the network input; the MLP sees it flattened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputDims {
    pub fn flat(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Architecture of a ReLU MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dims: InputDims,
    pub hidden_widths: Vec<usize>,
    pub num_outputs: usize,
}

impl NetSpec {
    pub fn new(input_dims: InputDims, hidden_widths: Vec<usize>, num_outputs: usize) -> Self {
        NetSpec { input_dims, hidden_widths, num_outputs }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.input_dims;
        if d.height == 0 || d.width == 0 || d.channels == 0 {
            return Err(TensorError::Config(format!(
                "input dims {}x{}x{} must be positive",
                d.height, d.width, d.channels
            )));
        }
        if let Some(i) = self.hidden_widths.iter().position(|&w| w == 0) {
            return Err(TensorError::Config(format!("hidden layer {i} has zero width")));
        }
        if self.num_outputs < 2 {
            return Err(TensorError::Config(format!(
                "num_outputs must be at least 2, got {}",
                self.num_outputs
            )));
        }
        Ok(())
    }

    /// (fan_in, fan_out) of every dense layer.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dims.flat()];
        widths.extend_from_slice(&self.hidden_widths);
        widths.push(self.num_outputs);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// One dense layer. `weights` is fan_in x fan_out so a forward pass is `x · W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer { weights: Matrix::zeros(fan_in, fan_out), bias: vec![0.0; fan_out] }
    }

    fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    spec: NetSpec,
    layers: Vec<Layer>,
}

/// Parameter gradients, laid out exactly like [`Network::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Network {
    /// Weights uniform in ±sqrt(6 / fan_in), biases zero.
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeds::rng(seeds::derive(seed, "net-init"));
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                Layer {
                    weights: Matrix { rows: fan_in, cols: fan_out, data },
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Network { spec, layers })
    }

    /// Build from explicit layers; shapes must chain from the spec's input to its outputs.
    pub fn from_layers(spec: NetSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(TensorError::Shape(format!(
                "spec needs {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (i, ((fan_in, fan_out), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.weights.rows != *fan_in
                || layer.weights.cols != *fan_out
                || layer.bias.len() != *fan_out
            {
                return Err(TensorError::Shape(format!(
                    "layer {i} must be {fan_in}x{fan_out} with {fan_out} biases"
                )));
            }
        }
        let net = Network { spec, layers };
        if !net.is_finite() {
            return Err(TensorError::Config("parameters must be finite".into()));
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_outputs(&self) -> usize {
        self.spec.num_outputs
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        let want = self.spec.input_dims.flat();
        if batch.cols != want {
            return Err(TensorError::Shape(format!(
                "batch width {} does not match flattened input size {want}",
                batch.cols
            )));
        }
        Ok(())
    }

    /// Post-activation outputs of every layer; the last entry holds the logits.
    fn trace(&self, batch: &Matrix) -> Vec<Matrix> {
        let mut acts: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == 0 { batch } else { &acts[l - 1] };
            let mut out = affine(input, layer);
            if l != last {
                out.data.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        Ok(self.trace(batch).pop().expect("at least one layer"))
    }

    /// Activations of the last hidden layer (the input itself for a network
    /// without hidden layers).
    pub fn penultimate(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut acts = self.trace(batch);
        acts.pop();
        Ok(acts.pop().unwrap_or_else(|| batch.clone()))
    }

    /// Mean cross-entropy of the batch.
    pub fn loss(&self, batch: &Matrix, labels: &[usize]) -> Result<f64> {
        let logits = self.forward(batch)?;
        let losses = cross_entropy(&logits, labels)?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_gradients(&self, batch: &Matrix, labels: &[usize]) -> Result<(f64, Gradients)> {
        self.check_input(batch)?;
        if labels.len() != batch.rows {
            return Err(TensorError::Shape(format!(
                "{} labels for a batch of {} rows",
                labels.len(),
                batch.rows
            )));
        }
        let acts = self.trace(batch);
        let logits = acts.last().expect("at least one layer");
        let n = batch.rows as f64;

        let mut loss = 0.0;
        let mut delta = Matrix::zeros(logits.rows, logits.cols);
        for (i, &y) in labels.iter().enumerate() {
            if y >= self.spec.num_outputs {
                return Err(TensorError::Label { label: y, num_outputs: self.spec.num_outputs });
            }
            let (probs, lse) = softmax_lse(logits.row(i));
            loss += lse - logits.get(i, y);
            let d = delta.row_mut(i);
            for (dj, pj) in d.iter_mut().zip(&probs) {
                *dj = pj / n;
            }
            d[y] -= 1.0 / n;
        }
        loss /= n;

        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let input = if l == 0 { batch } else { &acts[l - 1] };
            let layer = &self.layers[l];
            let mut g = Layer::zeros(layer.weights.rows, layer.weights.cols);
            for i in 0..delta.rows {
                let drow = delta.row(i);
                for (b, d) in g.bias.iter_mut().zip(drow) {
                    *b += d;
                }
                for (k, &a) in input.row(i).iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (w, d) in g.weights.row_mut(k).iter_mut().zip(drow) {
                        *w += a * d;
                    }
                }
            }
            if l > 0 {
                let mut prev = Matrix::zeros(delta.rows, layer.weights.rows);
                for i in 0..delta.rows {
                    let drow = delta.row(i);
                    let arow = input.row(i);
                    for (k, p) in prev.row_mut(i).iter_mut().enumerate() {
                        // ReLU derivative, zero at the kink.
                        if arow[k] > 0.0 {
                            *p = dot(drow, layer.weights.row(k));
                        }
                    }
                }
                delta = prev;
            }
            grads.push(g);
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn affine(input: &Matrix, layer: &Layer) -> Matrix {
    let w = &layer.weights;
    let mut out = Matrix::zeros(input.rows, w.cols);
    for i in 0..input.rows {
        let orow = out.row_mut(i);
        orow.copy_from_slice(&layer.bias);
        for (k, &a) in input.row(i).iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (o, wk) in orow.iter_mut().zip(w.row(k)) {
                *o += a * wk;
            }
        }
    }
    out
}

/// Softmax with max subtraction, returning the probabilities and log-sum-exp.
pub fn softmax_lse(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (exps.into_iter().map(|e| e / sum).collect(), max + sum.ln())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    softmax_lse(logits).0
}

/// Per-row cross-entropy of softmax(logits) against `labels`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != logits.rows {
        return Err(TensorError::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows
        )));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= logits.cols {
                return Err(TensorError::Label { label: y, num_outputs: logits.cols });
            }
            let row = logits.row(i);
            Ok(softmax_lse(row).1 - row[y])
        })
        .collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper { base_lr: 0.05, momentum: 0.9, weight_decay: 5e-4, epochs: 30, batch_size: 32 }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(TensorError::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TensorError::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TensorError::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(TensorError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TensorError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Momentum buffers plus the position used to label numeric failures.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub hyper: Hyper,
    velocity: Vec<Layer>,
    epoch: usize,
    batch: usize,
}

impl OptState {
    pub fn new(net: &Network, hyper: Hyper) -> Result<Self> {
        hyper.validate()?;
        let velocity = net
            .layers
            .iter()
            .map(|l| Layer::zeros(l.weights.rows, l.weights.cols))
            .collect();
        Ok(OptState { hyper, velocity, epoch: 0, batch: 0 })
    }

    /// Marks the start of an epoch; resets the batch counter.
    pub fn begin_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.batch = 0;
    }

    pub fn velocity(&self) -> &[Layer] {
        &self.velocity
    }
}

/// One SGD step: `v ← momentum·v + (g + weight_decay·w)`, `w ← w − lr·v`.
/// Returns the batch's mean cross-entropy before the update.
pub fn sgd_step(
    net: &mut Network,
    opt: &mut OptState,
    batch: &Matrix,
    labels: &[usize],
    lr: f64,
) -> Result<f64> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(TensorError::Config(format!("learning rate must be nonnegative, got {lr}")));
    }
    if opt.velocity.len() != net.layers.len() {
        return Err(TensorError::Shape("optimizer state does not match network".into()));
    }
    let failure = TensorError::NumericFailure { epoch: opt.epoch, batch: opt.batch };
    let (loss, grads) = net.loss_and_gradients(batch, labels)?;
    if !loss.is_finite() || !grads.layers.iter().all(Layer::is_finite) {
        return Err(failure);
    }
    let Hyper { momentum, weight_decay, .. } = opt.hyper;
    for ((layer, vel), grad) in net.layers.iter_mut().zip(&mut opt.velocity).zip(&grads.layers) {
        let params = layer.weights.data.iter_mut().chain(layer.bias.iter_mut());
        let vels = vel.weights.data.iter_mut().chain(vel.bias.iter_mut());
        let gs = grad.weights.data.iter().chain(grad.bias.iter());
        for ((w, v), g) in params.zip(vels).zip(gs) {
            *v = momentum * *v + (g + weight_decay * *w);
            *w -= lr * *v;
        }
    }
    opt.batch += 1;
    if !net.is_finite() {
        return Err(failure);
    }
    Ok(loss)
}

/// `base · ½ · (1 + cos(π·epoch/epochs))` for `epoch` in `[0, epochs)`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> Result<f64> {
    if epoch >= epochs {
        return Err(TensorError::Range { epoch, epochs });
    }
    let phase = std::f64::consts::PI * epoch as f64 / epochs as f64;
    Ok(base * 0.5 * (1.0 + phase.cos()))
}
