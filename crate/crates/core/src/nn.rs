//! Multilayer perceptrons over flat parameter vectors.
//!
//! A model is fully described by a [`ModelSpec`]; its weights live in a
//! [`ParamVector`] laid out layer by layer, each layer as a row-major
//! `fan_out × fan_in` weight matrix followed by `fan_out` biases. The flat
//! layout is what federated strategies transmit, average and perturb.
//!
//! Loss is mean softmax cross-entropy; gradients are computed by a hand
//! written backward pass and checked against [`fd_gradient`] in tests.

use std::ops::{Deref, DerefMut, Range};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
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

    /// Derivative given the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    /// Variance of the initial weights for a layer with `fan_in` inputs.
    fn init_variance(self, fan_in: usize) -> f64 {
        match self {
            Activation::Relu => 2.0 / fan_in as f64,
            Activation::Tanh => 1.0 / fan_in as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be at least 1".into()));
        }
        if self.output_dim < 2 {
            return Err(Error::InvalidConfig("output_dim must be at least 2".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("hidden layer widths must be nonzero".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(fan_in, fan_out)| (fan_in + 1) * fan_out)
            .sum()
    }

    /// Index range of each layer's parameters (weights followed by biases).
    pub fn layer_blocks(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.layer_shapes()
            .iter()
            .map(|&(fan_in, fan_out)| {
                let end = start + (fan_in + 1) * fan_out;
                let block = start..end;
                start = end;
                block
            })
            .collect()
    }

    /// Width of the representation returned as `hidden` by [`forward`].
    pub fn representation_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has {} entries, model needs {}",
                params.len(),
                self.param_count()
            )));
        }
        Ok(())
    }
}

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn fingerprint(&self) -> u64 {
        rng::fingerprint(&self.0)
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// A mini-batch: row-major `n × dim` features and one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::DimensionMismatch("batch must contain at least one sample".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} feature values for {} samples of dimension {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        Ok(Self {
            features,
            labels,
            dim,
        })
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

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch("batches differ in feature dimension".into()));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Batch::new(features, labels, self.dim)
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.dim != spec.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "batch dimension {} but model input is {}",
                self.dim, spec.input_dim
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= spec.output_dim) {
            return Err(Error::DimensionMismatch(format!(
                "label {bad} out of range for {} classes",
                spec.output_dim
            )));
        }
        Ok(())
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `n × output_dim`, row-major.
    pub logits: Vec<f64>,
    /// `n × representation_dim`, row-major: the last hidden layer's output,
    /// or the input features when the model has no hidden layer.
    pub hidden: Vec<f64>,
    pub n: usize,
    pub classes: usize,
    pub hidden_dim: usize,
    // inputs of every layer and pre-activations of hidden layers
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Forward {
    pub fn logits_row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.classes..(i + 1) * self.classes]
    }
}

fn affine(params: &[f64], input: &[f64], n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let (weights, bias) = params.split_at(fan_in * fan_out);
    let mut out = Vec::with_capacity(n * fan_out);
    for i in 0..n {
        let x = &input[i * fan_in..(i + 1) * fan_in];
        for o in 0..fan_out {
            let w = &weights[o * fan_in..(o + 1) * fan_in];
            let dot: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            out.push(bias[o] + dot);
        }
    }
    out
}

pub fn forward(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<Forward> {
    spec.check_params(params)?;
    batch.check(spec)?;
    let n = batch.len();
    let shapes = spec.layer_shapes();
    let last = shapes.len() - 1;

    let mut inputs = Vec::with_capacity(shapes.len());
    let mut pre = Vec::with_capacity(last);
    let mut current = batch.features.clone();
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
        let size = (fan_in + 1) * fan_out;
        let z = affine(&params[offset..offset + size], &current, n, fan_in, fan_out);
        offset += size;
        let layer_input = std::mem::replace(
            &mut current,
            if l == last {
                Vec::new()
            } else {
                z.iter().map(|&v| spec.activation.apply(v)).collect()
            },
        );
        inputs.push(layer_input);
        if l == last {
            current = z;
        } else {
            pre.push(z);
        }
    }
    let logits = current;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let hidden = inputs[last].clone();
    Ok(Forward {
        logits,
        hidden,
        n,
        classes: spec.output_dim,
        hidden_dim: spec.representation_dim(),
        inputs,
        pre,
    })
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy(fwd: &Forward, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let n = fwd.n;
    let c = fwd.classes;
    let mut total = 0.0;
    let mut dlogits = vec![0.0; n * c];
    for (i, &label) in labels.iter().enumerate() {
        let row = fwd.logits_row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label];
        let d = &mut dlogits[i * c..(i + 1) * c];
        for (k, dk) in d.iter_mut().enumerate() {
            *dk = (row[k] - lse).exp() / n as f64;
        }
        d[label] -= 1.0 / n as f64;
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss"));
    }
    Ok((loss.max(0.0), dlogits))
}

/// Backward pass. `dhidden` is an optional extra gradient injected at the
/// representation layer (ignored when the model has no hidden layer, since
/// the representation is then the raw input).
fn backward(
    spec: &ModelSpec,
    params: &[f64],
    fwd: &Forward,
    dlogits: Vec<f64>,
    dhidden: Option<&[f64]>,
) -> ParamVector {
    let n = fwd.n;
    let shapes = spec.layer_shapes();
    let blocks = spec.layer_blocks();
    let mut grad = vec![0.0; spec.param_count()];
    let mut dz = dlogits;
    for l in (0..shapes.len()).rev() {
        let (fan_in, fan_out) = shapes[l];
        let block = blocks[l].clone();
        let (weights, _) = params[block.clone()].split_at(fan_in * fan_out);
        let (gw, gb) = grad[block].split_at_mut(fan_in * fan_out);
        let input = &fwd.inputs[l];
        for i in 0..n {
            let x = &input[i * fan_in..(i + 1) * fan_in];
            for o in 0..fan_out {
                let d = dz[i * fan_out + o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, &xk) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x) {
                    *g += d * xk;
                }
            }
        }
        if l == 0 {
            break;
        }
        let mut da = vec![0.0; n * fan_in];
        for i in 0..n {
            let row = &mut da[i * fan_in..(i + 1) * fan_in];
            for o in 0..fan_out {
                let d = dz[i * fan_out + o];
                if d == 0.0 {
                    continue;
                }
                for (a, &w) in row.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                    *a += d * w;
                }
            }
        }
        if l == shapes.len() - 1 {
            if let Some(extra) = dhidden {
                for (a, e) in da.iter_mut().zip(extra) {
                    *a += e;
                }
            }
        }
        let z = &fwd.pre[l - 1];
        dz = da
            .iter()
            .zip(z)
            .zip(input)
            .map(|((&d, &z), &a)| d * spec.activation.derivative(z, a))
            .collect();
    }
    ParamVector(grad)
}

/// Mean cross-entropy over `batch` and its gradient.
pub fn loss_and_grad(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<(f64, ParamVector)> {
    let fwd = forward(spec, params, batch)?;
    let (loss, dlogits) = cross_entropy(&fwd, &batch.labels)?;
    Ok((loss, backward(spec, params, &fwd, dlogits, None)))
}

/// Cross-entropy plus an extra term that depends on the representation.
///
/// `term` receives the `n × representation_dim` hidden matrix and returns
/// its contribution to the loss together with the gradient of that
/// contribution with respect to every hidden entry.
pub fn loss_and_grad_with_representation_term<F>(
    spec: &ModelSpec,
    params: &[f64],
    batch: &Batch,
    term: F,
) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&Forward) -> Result<(f64, Vec<f64>)>,
{
    let fwd = forward(spec, params, batch)?;
    let (ce, dlogits) = cross_entropy(&fwd, &batch.labels)?;
    let (extra, dhidden) = term(&fwd)?;
    if dhidden.len() != fwd.hidden.len() {
        return Err(Error::DimensionMismatch("representation gradient has the wrong size".into()));
    }
    let loss = ce + extra;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok((loss, backward(spec, params, &fwd, dlogits, Some(&dhidden))))
}

pub fn loss(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<f64> {
    let fwd = forward(spec, params, batch)?;
    cross_entropy(&fwd, &batch.labels).map(|(l, _)| l)
}

/// Central finite-difference estimate of the loss gradient.
pub fn fd_gradient(spec: &ModelSpec, params: &[f64], batch: &Batch, eps: f64) -> Result<ParamVector> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let orig = probe[k];
        probe[k] = orig + eps;
        let up = loss(spec, &probe, batch)?;
        probe[k] = orig - eps;
        let down = loss(spec, &probe, batch)?;
        probe[k] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(ParamVector(grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Top-1 accuracy in `[0, 1]`.
    pub accuracy: f64,
    pub loss: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

const EVAL_CHUNK: usize = 512;

pub fn evaluate(spec: &ModelSpec, params: &[f64], dataset: &Dataset) -> Result<Evaluation> {
    let n = dataset.len();
    let mut correct = 0usize;
    let mut total_loss = 0.0;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = dataset.batch(chunk)?;
        let fwd = forward(spec, params, &batch)?;
        for (i, &label) in batch.labels.iter().enumerate() {
            let row = fwd.logits_row(i);
            if argmax(row) == label {
                correct += 1;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            total_loss += lse - row[label];
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        loss: total_loss / n as f64,
    })
}

/// He-style initialization: weights `N(0, 2/fan_in)` for ReLU and
/// `N(0, 1/fan_in)` for tanh, biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = rng::stream(seed, "init", &[]);
    let mut values = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layer_shapes() {
        let std = spec.activation.init_variance(fan_in).sqrt();
        for _ in 0..fan_in * fan_out {
            let z: f64 = StandardNormal.sample(&mut rng);
            values.push(std * z);
        }
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector(values)
}
