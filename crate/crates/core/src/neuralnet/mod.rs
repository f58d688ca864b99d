//! Minimal multilayer perceptron: ReLU hidden layers, linear output, softmax
//! cross-entropy loss, exact backprop and (optionally masked) minibatch SGD.
//!
//! Everything is computed in `f64`. Weights are stored row-major with one row
//! per output unit.

mod train;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

pub use train::{local_training, TrainingConfig};

/// Layer widths from input to output, e.g. `[784, 128, 47]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Architecture {
    layer_sizes: Vec<usize>,
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "architecture needs at least an input and an output layer".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument("layer sizes must be >= 1".into()));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight matrices.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Weights plus biases.
    pub fn parameter_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// One dense layer: `out = weights · in + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    rows: usize,
    cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn from_parts(rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != rows * cols || bias.len() != rows {
            return Err(Error::Shape(format!(
                "layer {rows}x{cols} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            weights,
            bias,
        })
    }

    /// Output units.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Input units.
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.cols + col]
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.cols)
                .zip(&self.bias)
                .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b),
        );
    }
}

/// The trainable state of an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub layers: Vec<Layer>,
}

impl ParameterSet {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            layers: arch
                .layer_sizes()
                .windows(2)
                .map(|w| Layer::zeros(w[1], w[0]))
                .collect(),
        }
    }

    pub fn architecture(&self) -> Architecture {
        let mut sizes = Vec::with_capacity(self.layers.len() + 1);
        if let Some(first) = self.layers.first() {
            sizes.push(first.cols);
        }
        sizes.extend(self.layers.iter().map(|l| l.rows));
        Architecture { layer_sizes: sizes }
    }

    pub fn same_shape(&self, other: &ParameterSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Iterate over all tensors in wire order: `W_0, b_0, W_1, b_1, ...`.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    /// `self += alpha * other`, shapes must match.
    pub(crate) fn axpy(&mut self, alpha: f64, other: &ParameterSet) {
        for (dst, src) in self.tensors_mut().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }
}

/// Samples are rows of `features`, stored flat row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("feature dimension must be >= 1".into()));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::Shape(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self { dim, features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i * self.dim..(i + 1) * self.dim], self.labels[i])
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn push(&mut self, x: &[f64], y: usize) {
        debug_assert_eq!(x.len(), self.dim);
        self.features.extend_from_slice(x);
        self.labels.push(y);
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut out = LabeledDataset::empty(self.dim);
        for &i in indices {
            let (x, y) = self.sample(i);
            out.push(x, y);
        }
        out
    }

    /// First `n - k` rows and last `k` rows.
    pub fn split_tail(&self, k: usize) -> (LabeledDataset, LabeledDataset) {
        let k = k.min(self.len());
        let cut = self.len() - k;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_parameters(arch: &Architecture, seed: u64) -> ParameterSet {
    let mut rng = seed::rng(seed, &[0x1417]);
    let mut params = ParameterSet::zeros(arch);
    for layer in &mut params.layers {
        let bound = (6.0 / (layer.rows + layer.cols) as f64).sqrt();
        for w in &mut layer.weights {
            *w = rng.random_range(-bound..=bound);
        }
    }
    params
}

fn check_input(params: &ParameterSet, dim: usize) -> Result<()> {
    let expected = params.layers.first().map(|l| l.cols).unwrap_or(0);
    if expected != dim {
        return Err(Error::Shape(format!(
            "input has {dim} features, network expects {expected}"
        )));
    }
    Ok(())
}

/// Logits for one sample.
pub fn forward(params: &ParameterSet, x: &[f64]) -> Result<Vec<f64>> {
    check_input(params, x.len())?;
    let mut cur = x.to_vec();
    let mut next = Vec::new();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        layer.affine(&cur, &mut next);
        if i != last {
            next.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and accuracy over `data`.
pub fn loss_and_accuracy(params: &ParameterSet, data: &LabeledDataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_input(params, data.dim())?;
    let classes = params.layers.last().map(|l| l.rows).unwrap_or(0);
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        if y >= classes {
            return Err(Error::Shape(format!("label {y} with {classes} classes")));
        }
        let logits = forward(params, x)?;
        loss += log_sum_exp(&logits) - logits[y];
        if argmax(&logits) == y {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Exact gradient of the mean cross-entropy over `batch`.
pub fn gradients(params: &ParameterSet, batch: &LabeledDataset) -> Result<ParameterSet> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_input(params, batch.dim())?;
    let classes = params.layers.last().map(|l| l.rows).unwrap_or(0);
    let depth = params.layers.len();
    let mut grad = ParameterSet {
        layers: params.layers.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect(),
    };
    let inv_n = 1.0 / batch.len() as f64;

    // activations[0] is the input, activations[i+1] the (post-ReLU) output of layer i.
    let mut activations: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];
    let mut delta = Vec::new();
    let mut prev_delta = Vec::new();

    for s in 0..batch.len() {
        let (x, y) = batch.sample(s);
        if y >= classes {
            return Err(Error::Shape(format!("label {y} with {classes} classes")));
        }
        activations[0].clear();
        activations[0].extend_from_slice(x);
        for (i, layer) in params.layers.iter().enumerate() {
            let (head, tail) = activations.split_at_mut(i + 1);
            layer.affine(&head[i], &mut tail[0]);
            if i + 1 != depth {
                tail[0].iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }

        // d(loss)/d(logits) = softmax - onehot
        let logits = &activations[depth];
        let lse = log_sum_exp(logits);
        delta.clear();
        delta.extend(logits.iter().map(|z| (z - lse).exp() * inv_n));
        delta[y] -= inv_n;

        for i in (0..depth).rev() {
            let layer = &params.layers[i];
            let g = &mut grad.layers[i];
            let input = &activations[i];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[r] += d;
                let row = &mut g.weights[r * layer.cols..(r + 1) * layer.cols];
                for (gw, a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            if i == 0 {
                break;
            }
            prev_delta.clear();
            prev_delta.resize(layer.cols, 0.0);
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                for (pd, w) in prev_delta.iter_mut().zip(row) {
                    *pd += d * w;
                }
            }
            // ReLU: activation > 0 iff pre-activation > 0
            for (pd, a) in prev_delta.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *pd = 0.0;
                }
            }
            std::mem::swap(&mut delta, &mut prev_delta);
        }
    }
    Ok(grad)
}
