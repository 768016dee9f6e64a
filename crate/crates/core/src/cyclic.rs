//! Cyclic sequential pre-training.
//!
//! Starting from a random model, every round samples a group of devices
//! and passes one live model through them in the sampled order: each device
//! trains it for a few SGD steps on its own data and hands it on, and the
//! model left by the last device starts the next round. Nothing is averaged.
//! The result is the warm start for federated training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::batches_per_epoch;
use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::rng;
use crate::strategies::{local_update, Hyperparams, LocalContext, StrategyKind, StrategyState};
use crate::task::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclicConfig {
    /// Number of pre-training rounds, `T_c`.
    pub rounds: usize,
    /// Devices visited per round, `S_c`.
    pub devices_per_round: usize,
    /// Cap on SGD steps a device spends on the model per visit.
    pub max_local_steps: usize,
    pub seed: u64,
}

impl Default for CyclicConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            devices_per_round: 25,
            max_local_steps: 20,
            seed: 0,
        }
    }
}

impl CyclicConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.rounds > 0 && (self.devices_per_round == 0 || self.devices_per_round > m) {
            return Err(Error::InvalidConfig(format!(
                "devices per pre-training round must be in 1..={m}, got {}",
                self.devices_per_round
            )));
        }
        if self.max_local_steps == 0 {
            return Err(Error::InvalidConfig("max_local_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// `k` distinct devices out of `0..m`, uniformly at random; the order of the
/// list is the visiting order. Deterministic in `(seed, round)`.
pub fn random_sample(m: usize, k: usize, seed: u64, round: usize) -> Result<Vec<usize>> {
    if k > m {
        return Err(Error::InvalidConfig(format!("cannot sample {k} of {m} devices")));
    }
    let mut devices: Vec<usize> = (0..m).collect();
    let mut rng = rng::stream(seed, "sample", &[round as u64]);
    let (picked, _) = devices.partial_shuffle(&mut rng, k);
    Ok(picked.to_vec())
}

/// One device's turn with the live model.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceVisit {
    pub device: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub input_fingerprint: u64,
    pub output_fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CyclicRound {
    /// 1-based round index.
    pub round: usize,
    pub visits: Vec<DeviceVisit>,
}

impl CyclicRound {
    pub fn sampled(&self) -> Vec<usize> {
        self.visits.iter().map(|v| v.device).collect()
    }

    pub fn total_steps(&self) -> usize {
        self.visits.iter().map(|v| v.steps).sum()
    }

    /// Step-weighted mean training loss.
    pub fn mean_loss(&self) -> f64 {
        let steps = self.total_steps();
        if steps == 0 {
            return 0.0;
        }
        self.visits.iter().map(|v| v.mean_loss * v.steps as f64).sum::<f64>() / steps as f64
    }
}

/// Steps a device with `n` samples spends per visit: `min(cap, ⌈n / batch⌉)`.
pub fn visit_steps(n: usize, batch_size: usize, max_local_steps: usize) -> usize {
    batches_per_epoch(n, batch_size).min(max_local_steps)
}

/// Run pre-training round `round` (1-based) on `params` with learning rate `lr`.
#[allow(clippy::too_many_arguments)]
pub fn cyclic_round<T: Task + ?Sized>(
    task: &T,
    mut params: ParamVector,
    devices: &[Vec<usize>],
    hp: &Hyperparams,
    cfg: &CyclicConfig,
    round: usize,
    lr: f64,
) -> Result<(ParamVector, CyclicRound)> {
    let sampled = random_sample(devices.len(), cfg.devices_per_round, cfg.seed, round)?;
    let hp = Hyperparams {
        local_epochs: 1,
        ..hp.clone()
    };
    let state = StrategyState::new(StrategyKind::FedAvg, params.len());
    let mut visits = Vec::with_capacity(sampled.len());
    for device in sampled {
        let samples = &devices[device];
        let input_fingerprint = params.fingerprint();
        let ctx = LocalContext {
            round,
            lr,
            seed: cfg.seed,
            steps_cap: Some(cfg.max_local_steps),
        };
        let out = local_update(task, StrategyKind::FedAvg, device, samples, &params, &hp, &state, ctx)?;
        params = out.params;
        visits.push(DeviceVisit {
            device,
            steps: out.steps,
            mean_loss: out.mean_loss,
            input_fingerprint,
            output_fingerprint: params.fingerprint(),
        });
    }
    Ok((params, CyclicRound { round, visits }))
}

/// Pre-train `w_rg` for `cfg.rounds` rounds and return the warm start `w_wg`.
pub fn cyclic_pretrain<T: Task + ?Sized>(
    task: &T,
    w_rg: ParamVector,
    devices: &[Vec<usize>],
    hp: &Hyperparams,
    cfg: &CyclicConfig,
) -> Result<(ParamVector, Vec<CyclicRound>)> {
    hp.validate()?;
    cfg.validate(devices.len())?;
    let mut params = w_rg;
    let mut logs = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let (next, log) = cyclic_round(task, params, devices, hp, cfg, round, hp.lr_at(round))?;
        params = next;
        logs.push(log);
    }
    Ok((params, logs))
}

/// Devices visited at least once during pre-training, ascending.
pub fn pretraining_devices(m: usize, cfg: &CyclicConfig) -> Result<Vec<usize>> {
    let mut touched = vec![false; m];
    for round in 1..=cfg.rounds {
        for d in random_sample(m, cfg.devices_per_round, cfg.seed, round)? {
            touched[d] = true;
        }
    }
    Ok((0..m).filter(|&d| touched[d]).collect())
}

/// Pre-training communication: `2 · S_c · T_c · X`.
pub fn comm_units_p1(cfg: &CyclicConfig, model_units: f64) -> f64 {
    2.0 * cfg.devices_per_round as f64 * cfg.rounds as f64 * model_units
}
