//! Local update rules and server-side aggregation for FedAvg, FedProx,
//! SCAFFOLD and Moon.

mod aggregate;
pub mod moon;

pub use aggregate::{aggregate, scaffold_server_update};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::BatchStream;
use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::task::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    #[default]
    FedAvg,
    FedProx,
    Scaffold,
    Moon,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::FedAvg,
        StrategyKind::FedProx,
        StrategyKind::Scaffold,
        StrategyKind::Moon,
    ];

    /// Model-sized transfers per participant per federated round: the model
    /// down and back up, plus the control variates for SCAFFOLD.
    pub fn transfers_per_participant(self) -> u64 {
        match self {
            StrategyKind::Scaffold => 4,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedProx => "fedprox",
            StrategyKind::Scaffold => "scaffold",
            StrategyKind::Moon => "moon",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy {s:?}")))
    }
}

/// Local training hyperparameters. Defaults are the non-CIFAR-100 setup:
/// lr 0.01 decaying by 0.998 per round, no momentum or weight decay, batch
/// 32, 5 local epochs, FedProx μ 0.01, Moon τ 0.5 and μ 0.1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub lr_decay_per_round: f64,
    pub mu_prox: f64,
    pub tau_moon: f64,
    pub mu_moon: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 32,
            local_epochs: 5,
            lr_decay_per_round: 0.998,
            mu_prox: 0.01,
            tau_moon: 0.5,
            mu_moon: 0.1,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative finite number");
        }
        if !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) || !(self.mu_prox >= 0.0) || !(self.mu_moon >= 0.0) {
            return bad("momentum, weight_decay, mu_prox and mu_moon must be non-negative");
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return bad("batch_size and local_epochs must be at least 1");
        }
        if !(self.lr_decay_per_round > 0.0 && self.lr_decay_per_round <= 1.0) {
            return bad("lr_decay_per_round must lie in (0, 1]");
        }
        if !(self.tau_moon > 0.0) {
            return bad("tau_moon must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect during `round` (1-based): `lr · decay^(round−1)`.
    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr * self.lr_decay_per_round.powi(round.saturating_sub(1) as i32)
    }
}

/// Mutable per-strategy server state.
///
/// Client variates default to zero and previous local models default to
/// the current global model until a device has participated once.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyState {
    pub kind: StrategyKind,
    pub c_global: ParamVector,
    pub c_client: BTreeMap<usize, ParamVector>,
    pub prev_local: BTreeMap<usize, ParamVector>,
}

impl StrategyState {
    pub fn new(kind: StrategyKind, param_count: usize) -> Self {
        Self {
            kind,
            c_global: ParamVector::zeros(param_count),
            c_client: BTreeMap::new(),
            prev_local: BTreeMap::new(),
        }
    }

    pub fn client_variate(&self, device: usize) -> ParamVector {
        self.c_client
            .get(&device)
            .cloned()
            .unwrap_or_else(|| ParamVector::zeros(self.c_global.len()))
    }

    pub fn prev_local_or<'a>(&'a self, device: usize, global: &'a [f64]) -> &'a [f64] {
        self.prev_local.get(&device).map_or(global, |p| p)
    }
}

/// Gradient of `(μ/2)‖w − w_global‖²` added in place.
pub fn add_proximal(grad: &mut [f64], w: &[f64], global: &[f64], mu: f64) {
    for ((g, w), w0) in grad.iter_mut().zip(w).zip(global) {
        *g += mu * (w - w0);
    }
}

/// Per-call settings of [`local_update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalContext {
    /// 1-based round index; selects the batch shuffles.
    pub round: usize,
    /// Learning rate for this round.
    pub lr: f64,
    pub seed: u64,
    /// Upper bound on mini-batch steps, on top of the epoch budget.
    pub steps_cap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub params: ParamVector,
    pub steps: usize,
    /// Mean training loss over the executed steps.
    pub mean_loss: f64,
    /// SCAFFOLD only: the refreshed client control variate.
    pub client_variate: Option<ParamVector>,
}

/// Run one device's local training starting from `global`.
///
/// Executes `min(local_epochs · ⌈N_i / batch_size⌉, steps_cap)` SGD steps.
/// The step direction is the minibatch gradient plus weight decay, plus the
/// proximal pull toward `global` (FedProx), plus the drift correction
/// `c − c_i` (SCAFFOLD), or computed on the loss augmented by the
/// model-contrastive term (Moon); momentum buffers start at zero.
#[allow(clippy::too_many_arguments)]
pub fn local_update<T: Task + ?Sized>(
    task: &T,
    kind: StrategyKind,
    device: usize,
    samples: &[usize],
    global: &[f64],
    hp: &Hyperparams,
    state: &StrategyState,
    ctx: LocalContext,
) -> Result<LocalOutcome> {
    if state.kind != kind {
        return Err(Error::InvalidConfig(format!("state belongs to {} but update is {kind}", state.kind)));
    }
    if global.len() != task.param_count() {
        return Err(Error::DimensionMismatch("global model does not match the task".into()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidConfig(format!("device {device} owns no samples")));
    }
    let mut stream = BatchStream::new(samples, hp.batch_size, ctx.seed, device, ctx.round);
    let mut steps = hp.local_epochs * stream.batches_per_epoch();
    if let Some(cap) = ctx.steps_cap {
        steps = steps.min(cap);
    }

    let diverged = |reason: String| Error::Divergence {
        round: ctx.round,
        device: Some(device),
        reason,
    };

    let c_i = (kind == StrategyKind::Scaffold).then(|| state.client_variate(device));
    let prev = state.prev_local_or(device, global);
    let mut w = global.to_vec();
    let mut velocity = vec![0.0; w.len()];
    let mut total_loss = 0.0;

    for batch in stream.by_ref().take(steps) {
        let (loss, mut g) = match kind {
            StrategyKind::Moon => {
                task.contrastive_loss_grad(device, &w, &batch, global, prev, hp.tau_moon, hp.mu_moon)
            }
            _ => task.loss_grad(device, &w, &batch),
        }
        .map_err(|e| match e {
            Error::NonFinite(what) => diverged(format!("non-finite {what}")),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(diverged("non-finite loss".into()));
        }
        total_loss += loss;

        if hp.weight_decay != 0.0 {
            for (g, w) in g.iter_mut().zip(&w) {
                *g += hp.weight_decay * w;
            }
        }
        if kind == StrategyKind::FedProx && hp.mu_prox != 0.0 {
            add_proximal(&mut g, &w, global, hp.mu_prox);
        }
        if let Some(c_i) = &c_i {
            for ((g, c), ci) in g.iter_mut().zip(state.c_global.iter()).zip(c_i.iter()) {
                *g += c - ci;
            }
        }
        if hp.momentum != 0.0 {
            for (v, g) in velocity.iter_mut().zip(g.iter()) {
                *v = hp.momentum * *v + g;
            }
            for (w, v) in w.iter_mut().zip(&velocity) {
                *w -= ctx.lr * v;
            }
        } else {
            for (w, g) in w.iter_mut().zip(g.iter()) {
                *w -= ctx.lr * g;
            }
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(diverged("non-finite parameters".into()));
        }
    }

    // Option II refresh: c_i ← c_i − c + (x − y_i) / (K·η)
    let client_variate = c_i.map(|c_i| {
        if steps == 0 || ctx.lr == 0.0 {
            return c_i;
        }
        let scale = 1.0 / (steps as f64 * ctx.lr);
        c_i.iter()
            .zip(state.c_global.iter())
            .zip(global.iter().zip(&w))
            .map(|((ci, c), (x, y))| ci - c + (x - y) * scale)
            .collect::<Vec<_>>()
            .into()
    });

    Ok(LocalOutcome {
        params: w.into(),
        steps,
        mean_loss: if steps > 0 { total_loss / steps as f64 } else { 0.0 },
        client_variate,
    })
}
