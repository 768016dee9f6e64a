//! Workloads the federated engine can train.
//!
//! The engine only needs per-device losses and gradients, a held-out
//! evaluation and a fixed probe objective; [`MlpTask`] provides them for a
//! neural network over a partitioned dataset and [`QuadraticTask`] for the
//! closed-form quadratic clients used as a convergence oracle.

use std::ops::Range;

use rand::seq::SliceRandom;

use crate::data::{Dataset, QuadraticProblem};
use crate::error::{Error, Result};
use crate::nn::{self, Batch, ModelSpec, ParamVector};
use crate::rng;
use crate::strategies::moon;

/// Held-out metrics. `accuracy` is absent for objectives without labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldOut {
    pub accuracy: Option<f64>,
    pub loss: f64,
}

pub trait Task: Sync {
    fn param_count(&self) -> usize;

    /// Parameter ranges that form one layer each.
    fn param_blocks(&self) -> Vec<Range<usize>>;

    /// Mean loss of `device`'s objective over `samples` and its gradient.
    fn loss_grad(&self, device: usize, params: &[f64], samples: &[usize]) -> Result<(f64, ParamVector)>;

    /// Loss plus `mu · ℓ_con` of the model-contrastive objective.
    #[allow(clippy::too_many_arguments)]
    fn contrastive_loss_grad(
        &self,
        _device: usize,
        _params: &[f64],
        _samples: &[usize],
        _global: &[f64],
        _prev_local: &[f64],
        _tau: f64,
        _mu: f64,
    ) -> Result<(f64, ParamVector)> {
        Err(Error::Unsupported("model-contrastive training"))
    }

    fn evaluate(&self, params: &[f64]) -> Result<HeldOut>;

    /// Loss on the fixed probe objective.
    fn probe_loss(&self, params: &[f64]) -> Result<f64>;

    /// Squared gradient norm of the probe objective.
    fn probe_grad_norm_sq(&self, params: &[f64]) -> Result<f64>;
}

/// Squared gradient norm of the mean cross-entropy over `probe`.
pub fn grad_norm_probe(spec: &ModelSpec, params: &[f64], probe: &Batch) -> Result<f64> {
    nn::loss_and_grad(spec, params, probe).map(|(_, g)| g.norm_sq())
}

/// Neural-network classification over a training set and an optional test set.
#[derive(Debug, Clone)]
pub struct MlpTask<'a> {
    spec: ModelSpec,
    train: &'a Dataset,
    test: Option<&'a Dataset>,
    probe: Batch,
}

impl<'a> MlpTask<'a> {
    /// The probe set is a deterministic subsample of at most `probe_size`
    /// training samples.
    pub fn new(spec: ModelSpec, train: &'a Dataset, test: Option<&'a Dataset>, probe_size: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.input_dim != train.dim() || test.is_some_and(|t| t.dim() != train.dim()) {
            return Err(Error::DimensionMismatch("model input and dataset dimension differ".into()));
        }
        if spec.output_dim < train.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "model has {} outputs but the dataset has {} classes",
                spec.output_dim,
                train.num_classes()
            )));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(seed, "probe", &[]));
        order.truncate(probe_size.clamp(1, train.len()));
        order.sort_unstable();
        let probe = train.batch(&order)?;
        Ok(Self {
            spec,
            train,
            test,
            probe,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn probe(&self) -> &Batch {
        &self.probe
    }
}

fn mean_hidden(fwd: &nn::Forward) -> Vec<f64> {
    let h = fwd.hidden_dim;
    let mut z = vec![0.0; h];
    for i in 0..fwd.n {
        for (acc, v) in z.iter_mut().zip(&fwd.hidden[i * h..(i + 1) * h]) {
            *acc += v;
        }
    }
    z.iter_mut().for_each(|v| *v /= fwd.n as f64);
    z
}

impl Task for MlpTask<'_> {
    fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    fn param_blocks(&self) -> Vec<Range<usize>> {
        self.spec.layer_blocks()
    }

    fn loss_grad(&self, _device: usize, params: &[f64], samples: &[usize]) -> Result<(f64, ParamVector)> {
        nn::loss_and_grad(&self.spec, params, &self.train.batch(samples)?)
    }

    fn contrastive_loss_grad(
        &self,
        _device: usize,
        params: &[f64],
        samples: &[usize],
        global: &[f64],
        prev_local: &[f64],
        tau: f64,
        mu: f64,
    ) -> Result<(f64, ParamVector)> {
        let batch = self.train.batch(samples)?;
        let z_global = mean_hidden(&nn::forward(&self.spec, global, &batch)?);
        let z_prev = mean_hidden(&nn::forward(&self.spec, prev_local, &batch)?);
        nn::loss_and_grad_with_representation_term(&self.spec, params, &batch, |fwd| {
            let z = mean_hidden(fwd);
            let (l, dz) = moon::contrastive_loss_grad(&z, &z_global, &z_prev, tau);
            let scale = mu / fwd.n as f64;
            let mut dhidden = Vec::with_capacity(fwd.hidden.len());
            for _ in 0..fwd.n {
                dhidden.extend(dz.iter().map(|d| scale * d));
            }
            Ok((mu * l, dhidden))
        })
    }

    fn evaluate(&self, params: &[f64]) -> Result<HeldOut> {
        let ds = self.test.unwrap_or(self.train);
        let e = nn::evaluate(&self.spec, params, ds)?;
        Ok(HeldOut {
            accuracy: Some(e.accuracy),
            loss: e.loss,
        })
    }

    fn probe_loss(&self, params: &[f64]) -> Result<f64> {
        nn::loss(&self.spec, params, &self.probe)
    }

    fn probe_grad_norm_sq(&self, params: &[f64]) -> Result<f64> {
        grad_norm_probe(&self.spec, params, &self.probe)
    }
}

/// Quadratic clients; sample indices are ignored and every step uses the
/// exact client gradient.
#[derive(Debug, Clone)]
pub struct QuadraticTask {
    pub problem: QuadraticProblem,
}

impl QuadraticTask {
    pub fn new(problem: QuadraticProblem) -> Self {
        Self { problem }
    }
}

impl Task for QuadraticTask {
    fn param_count(&self) -> usize {
        self.problem.dim()
    }

    fn param_blocks(&self) -> Vec<Range<usize>> {
        vec![0..self.problem.dim()]
    }

    fn loss_grad(&self, device: usize, params: &[f64], _samples: &[usize]) -> Result<(f64, ParamVector)> {
        if device >= self.problem.num_clients() {
            return Err(Error::DimensionMismatch(format!("no quadratic client {device}")));
        }
        Ok((
            self.problem.client_loss(device, params),
            self.problem.client_grad(device, params).into(),
        ))
    }

    fn evaluate(&self, params: &[f64]) -> Result<HeldOut> {
        Ok(HeldOut {
            accuracy: None,
            loss: self.problem.global_loss(params),
        })
    }

    fn probe_loss(&self, params: &[f64]) -> Result<f64> {
        Ok(self.problem.global_loss(params))
    }

    fn probe_grad_norm_sq(&self, params: &[f64]) -> Result<f64> {
        Ok(self.problem.global_grad(params).iter().map(|g| g * g).sum())
    }
}
