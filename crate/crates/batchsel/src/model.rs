//! A small feed-forward softmax classifier with manual backpropagation.
//!
//! Parameters live in one flat `f64` vector (per layer: row-major weights,
//! then biases) so optimizers can treat the model as a plain vector. The
//! forward pass exposes per-example cross-entropy losses in nats, which the
//! batch-selection trainer records as the "latest known loss" of each
//! datapoint.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::Dataset;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed in terms of the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Layer sizes, hidden activation and the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ModelParams {
    sizes: Vec<usize>,
    activation: Activation,
    theta: Vec<f64>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum()
}

impl ModelParams {
    /// Glorot-uniform weights (zero-mean, scale `sqrt(6/(fan_in+fan_out))`),
    /// zero biases, drawn deterministically from the seed.
    pub fn init(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self, ModelError> {
        check_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                theta.push(rng.random_range(-limit..limit));
            }
            theta.resize(theta.len() + fan_out, 0.0);
        }
        Ok(ModelParams {
            sizes: sizes.to_vec(),
            activation,
            theta,
        })
    }

    /// Rebuild a model from a flat vector (the inverse of [`theta`](Self::theta)).
    pub fn from_flat(
        sizes: Vec<usize>,
        activation: Activation,
        theta: Vec<f64>,
    ) -> Result<Self, ModelError> {
        check_sizes(&sizes)?;
        let expected = param_count(&sizes);
        if theta.len() != expected {
            return Err(ModelError::DimensionMismatch(format!(
                "flat vector has {} entries, layer sizes need {expected}",
                theta.len()
            )));
        }
        Ok(ModelParams {
            sizes,
            activation,
            theta,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Offset of a layer's parameters in the flat vector: the parameter
    /// counts of all earlier layers summed.
    fn offset_of(&self, layer: usize) -> usize {
        self.sizes[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.offset_of(layer);
        ArrayView2::from_shape((fan_in, fan_out), &self.theta[off..off + fan_in * fan_out])
            .expect("layer layout is consistent")
    }

    fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.offset_of(layer) + fan_in * fan_out;
        ArrayView1::from_shape(fan_out, &self.theta[off..off + fan_out])
            .expect("layer layout is consistent")
    }

    /// Write a portable binary checkpoint: layer-size header plus the flat
    /// parameter vector, little-endian.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(b"BSCK")?;
        out.write_all(&[1u8, match self.activation {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }])?;
        out.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.sizes {
            out.write_all(&(s as u32).to_le_bytes())?;
        }
        for &v in &self.theta {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"BSCK" {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let mut meta = [0u8; 2];
        input.read_exact(&mut meta)?;
        if meta[0] != 1 {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {}",
                meta[0]
            )));
        }
        let activation = match meta[1] {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            other => {
                return Err(ModelError::Checkpoint(format!(
                    "unknown activation tag {other}"
                )))
            }
        };
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf)?;
        let n_sizes = u32::from_le_bytes(u32buf) as usize;
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            input.read_exact(&mut u32buf)?;
            sizes.push(u32::from_le_bytes(u32buf) as usize);
        }
        let mut theta = Vec::with_capacity(param_count(&sizes));
        let mut f64buf = [0u8; 8];
        for _ in 0..param_count(&sizes) {
            input.read_exact(&mut f64buf)?;
            theta.push(f64::from_le_bytes(f64buf));
        }
        Self::from_flat(sizes, activation, theta)
    }
}

fn check_sizes(sizes: &[usize]) -> Result<(), ModelError> {
    if sizes.len() < 2 {
        return Err(ModelError::InvalidArgument(
            "need at least input and output layer sizes".into(),
        ));
    }
    if sizes.contains(&0) {
        return Err(ModelError::InvalidArgument(
            "layer sizes must be at least 1".into(),
        ));
    }
    Ok(())
}

/// Per-example losses, their mean, and the gradient of the (possibly
/// weighted) mean loss with respect to the flat parameter vector.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub per_example_losses: Vec<f64>,
    pub mean_loss: f64,
    pub gradient: Vec<f64>,
}

fn check_batch(
    params: &ModelParams,
    features: &ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<(), ModelError> {
    if features.ncols() != params.input_dim() {
        return Err(ModelError::DimensionMismatch(format!(
            "features have {} columns, model expects {}",
            features.ncols(),
            params.input_dim()
        )));
    }
    if features.nrows() != labels.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if features.nrows() == 0 {
        return Err(ModelError::InvalidArgument("empty batch".into()));
    }
    let classes = params.output_dim();
    if labels.iter().any(|&l| l >= classes) {
        return Err(ModelError::InvalidArgument(format!(
            "label out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Forward pass caching hidden activations (needed for backprop).
fn forward_hidden(params: &ModelParams, features: &ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
    let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(params.n_layers() - 1);
    for layer in 0..params.n_layers() - 1 {
        let mut z = if layer == 0 {
            features.dot(&params.weight(0))
        } else {
            hidden[layer - 1].dot(&params.weight(layer))
        };
        z += &params.bias(layer);
        z.mapv_inplace(|v| params.activation.apply(v));
        hidden.push(z);
    }
    hidden
}

fn logits_from_hidden(
    params: &ModelParams,
    features: &ArrayView2<'_, f64>,
    hidden: &[Array2<f64>],
) -> Array2<f64> {
    let last = params.n_layers() - 1;
    let mut logits = if last == 0 {
        features.dot(&params.weight(0))
    } else {
        hidden[last - 1].dot(&params.weight(last))
    };
    logits += &params.bias(last);
    logits
}

/// Stable per-example cross-entropy in nats: `logsumexp(z) - z[label]`.
fn losses_from_logits(logits: &Array2<f64>, labels: &[usize]) -> Vec<f64> {
    logits
        .outer_iter()
        .zip(labels)
        .map(|(row, &label)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            max + sum.ln() - row[label]
        })
        .collect()
}

/// Per-example cross-entropy losses for a feature batch.
pub fn forward_loss(
    params: &ModelParams,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<Vec<f64>, ModelError> {
    check_batch(params, &features, labels)?;
    let hidden = forward_hidden(params, &features);
    let logits = logits_from_hidden(params, &features, &hidden);
    Ok(losses_from_logits(&logits, labels))
}

/// Gradient of the batch-mean loss (plus the losses themselves).
pub fn forward_backward(
    params: &ModelParams,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<BatchResult, ModelError> {
    forward_backward_weighted(params, features, labels, None)
}

/// As [`forward_backward`], with optional per-example weights applied to the
/// loss contributions before averaging: the gradient becomes
/// `(1/b) * sum_i w_i * grad psi_i`. Per-example losses and their reported
/// mean stay unweighted.
pub fn forward_backward_weighted(
    params: &ModelParams,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<BatchResult, ModelError> {
    check_batch(params, &features, labels)?;
    let batch = features.nrows();
    if let Some(w) = weights {
        if w.len() != batch {
            return Err(ModelError::DimensionMismatch(format!(
                "{} weights for a batch of {batch}",
                w.len()
            )));
        }
    }

    let hidden = forward_hidden(params, &features);
    let logits = logits_from_hidden(params, &features, &hidden);
    let per_example_losses = losses_from_logits(&logits, labels);
    let mean_loss = per_example_losses.iter().sum::<f64>() / batch as f64;

    // Seed of the backward pass: row i of d(loss)/d(logits) is
    // u_i * (softmax(z_i) - onehot(y_i)) with u_i = w_i / b.
    let mut delta = logits;
    for (i, mut row) in delta.outer_iter_mut().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for z in row.iter_mut() {
            *z = (*z - max).exp();
            sum += *z;
        }
        let u = weights.map_or(1.0, |w| w[i]) / batch as f64;
        for z in row.iter_mut() {
            *z = *z / sum * u;
        }
        row[labels[i]] -= u;
    }

    let mut gradient = vec![0.0; params.n_params()];
    for layer in (0..params.n_layers()).rev() {
        let (fan_in, fan_out) = (params.sizes[layer], params.sizes[layer + 1]);
        let off = params.offset_of(layer);
        let inputs = if layer == 0 {
            features.view()
        } else {
            hidden[layer - 1].view()
        };
        let grad_w = inputs.t().dot(&delta);
        gradient[off..off + fan_in * fan_out]
            .copy_from_slice(grad_w.as_standard_layout().as_slice().unwrap());
        let grad_b = delta.sum_axis(Axis(0));
        gradient[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]
            .copy_from_slice(grad_b.as_slice().unwrap());
        if layer > 0 {
            let mut upstream = delta.dot(&params.weight(layer).t());
            upstream
                .zip_mut_with(&hidden[layer - 1], |d, &a| {
                    *d *= params.activation.derivative_from_output(a)
                });
            delta = upstream;
        }
    }

    Ok(BatchResult {
        per_example_losses,
        mean_loss,
        gradient,
    })
}

/// Dataset-wide mean loss and top-1 error rate, evaluated in chunks of
/// `eval_batch` rows. The running loss sum is accumulated per example in
/// dataset order, so the result does not depend on the chunking; argmax ties
/// resolve to the lowest class id.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    eval_batch: usize,
) -> Result<(f64, f64), ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::InvalidArgument(
            "cannot evaluate an empty dataset".into(),
        ));
    }
    if eval_batch == 0 {
        return Err(ModelError::InvalidArgument(
            "eval_batch must be at least 1".into(),
        ));
    }
    if dataset.dim() != params.input_dim() {
        return Err(ModelError::DimensionMismatch(format!(
            "dataset dimension {} does not match model input {}",
            dataset.dim(),
            params.input_dim()
        )));
    }
    let n = dataset.n();
    let mut loss_sum = 0.0;
    let mut errors = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + eval_batch).min(n);
        let chunk = dataset.features().slice(ndarray::s![start..end, ..]);
        let labels = &dataset.labels()[start..end];
        let hidden = forward_hidden(params, &chunk);
        let logits = logits_from_hidden(params, &chunk, &hidden);
        for (row, &label) in logits.outer_iter().zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            loss_sum += max + sum.ln() - row[label];
            let mut best = 0usize;
            for (j, &z) in row.iter().enumerate() {
                if z > row[best] {
                    best = j;
                }
            }
            if best != label {
                errors += 1;
            }
        }
        start = end;
    }
    Ok((loss_sum / n as f64, errors as f64 / n as f64))
}
