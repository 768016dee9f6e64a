//! Two-phase experiment driver.
//!
//! Rounds `1..=T_c` run cyclic pre-training; rounds `T_c+1..=T_total` run
//! parallel federated training under the configured strategy. The round
//! counter is shared, so the learning-rate decay continues across the phase
//! boundary unless `reset_lr_after_p1` is set.
//!
//! Client updates of a federated round are pure functions of the round's
//! global model and strategy state, so they may run on a thread pool; the
//! results are collected in sampling order and aggregated on one thread,
//! which keeps every run bit-identical regardless of `threads`.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cyclic::{cyclic_round, random_sample, CyclicConfig};
use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::nn::{init_params, ModelSpec, ParamVector};
use crate::rng;
use crate::strategies::{
    aggregate, local_update, scaffold_server_update, Hyperparams, LocalContext, LocalOutcome, StrategyKind,
    StrategyState,
};
use crate::task::{MlpTask, Task};

/// Size of the training subsample the gradient-norm probe is computed on.
pub const DEFAULT_PROBE_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Total number of devices.
    pub m: usize,
    /// Pre-training schedule; its `seed` is replaced by the experiment seed.
    pub p1: CyclicConfig,
    /// Federated rounds after pre-training, `T_res = T_total − T_c`.
    pub p2_rounds: usize,
    /// Fraction of devices sampled per federated round.
    pub p2_fraction: f64,
    pub strategy: StrategyKind,
    pub hp: Hyperparams,
    /// Optional cap on local steps per federated round, on top of the epochs.
    pub steps_cap: Option<usize>,
    pub eval_every: usize,
    pub target_accuracy: Option<f64>,
    pub seed: u64,
    pub reset_lr_after_p1: bool,
    /// Worker threads for federated client updates; results do not depend on it.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            m: 100,
            p1: CyclicConfig::default(),
            p2_rounds: 900,
            p2_fraction: 0.10,
            strategy: StrategyKind::FedAvg,
            hp: Hyperparams::default(),
            steps_cap: None,
            eval_every: 1,
            target_accuracy: None,
            seed: 0,
            reset_lr_after_p1: false,
            threads: 1,
        }
    }
}

/// `⌈fraction · m⌉`, tolerant of the rounding in products like `0.1 · 100`.
pub fn devices_for_fraction(fraction: f64, m: usize) -> usize {
    ((fraction * m as f64 - 1e-9).ceil().max(0.0) as usize).min(m)
}

impl ExperimentConfig {
    pub fn total_rounds(&self) -> usize {
        self.p1.rounds + self.p2_rounds
    }

    /// `S_p`.
    pub fn p2_devices_per_round(&self) -> usize {
        devices_for_fraction(self.p2_fraction, self.m)
    }

    pub fn p1_config(&self) -> CyclicConfig {
        CyclicConfig {
            seed: self.seed,
            ..self.p1.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidConfig("need at least one device".into()));
        }
        if !(self.p2_fraction > 0.0 && self.p2_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("p2_fraction must lie in (0, 1], got {}", self.p2_fraction)));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::InvalidConfig("threads must be at least 1".into()));
        }
        self.p1.validate(self.m)?;
        self.hp.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    P1,
    P2,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::P1 => "P1",
            Phase::P2 => "P2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    /// 1-based round index over both phases.
    pub round: usize,
    pub phase: Phase,
    /// Devices in sampling (= visiting) order.
    pub sampled: Vec<usize>,
    pub train_loss: f64,
    /// Held-out top-1 accuracy, on evaluation rounds only.
    pub test_acc: Option<f64>,
    pub test_loss: Option<f64>,
    /// `‖∇ℓ‖²` on the probe set, on evaluation rounds only.
    pub grad_norm_sq: Option<f64>,
    /// Model-sized transfers so far.
    pub cum_comm_units: f64,
    pub input_fingerprint: u64,
    pub output_fingerprint: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub final_params: ParamVector,
    /// The warm start handed from pre-training to federated training.
    pub pretrained: Option<ParamVector>,
    pub logs: Vec<RoundLog>,
    pub state: StrategyState,
}

/// Train an MLP on `train` partitioned by `partition`, evaluating on `test`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    partition: &Partition,
) -> Result<ExperimentOutcome> {
    let task = MlpTask::new(spec.clone(), train, Some(test), DEFAULT_PROBE_SIZE, cfg.seed)?;
    let init = init_params(spec, rng::derive_seed(cfg.seed, "model", &[]));
    run_federated(&task, cfg, &partition.assignments, init, |_| {})
}

fn evaluate_round<T: Task + ?Sized>(task: &T, params: &[f64], log: &mut RoundLog) -> Result<()> {
    let diverged = |e| match e {
        Error::NonFinite(what) => Error::Divergence {
            round: log.round,
            device: None,
            reason: format!("non-finite {what} in evaluation"),
        },
        other => other,
    };
    let held = task.evaluate(params).map_err(diverged)?;
    let grad_norm_sq = task.probe_grad_norm_sq(params).map_err(diverged)?;
    log.test_acc = held.accuracy;
    log.test_loss = Some(held.loss);
    log.grad_norm_sq = Some(grad_norm_sq);
    Ok(())
}

/// Generic two-phase driver over any [`Task`]; `on_round` sees every log as
/// soon as its round completes.
pub fn run_federated<T, F>(
    task: &T,
    cfg: &ExperimentConfig,
    devices: &[Vec<usize>],
    init: ParamVector,
    mut on_round: F,
) -> Result<ExperimentOutcome>
where
    T: Task + ?Sized,
    F: FnMut(&RoundLog),
{
    cfg.validate()?;
    if devices.len() != cfg.m {
        return Err(Error::InvalidConfig(format!(
            "partition has {} devices, configuration expects {}",
            devices.len(),
            cfg.m
        )));
    }
    if init.len() != task.param_count() {
        return Err(Error::DimensionMismatch("initial model does not match the task".into()));
    }
    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::InvalidConfig(e.to_string()))?,
        )
    } else {
        None
    };

    let p1 = cfg.p1_config();
    let total = cfg.total_rounds();
    let lr_for = |round: usize| {
        if cfg.reset_lr_after_p1 && round > p1.rounds {
            cfg.hp.lr_at(round - p1.rounds)
        } else {
            cfg.hp.lr_at(round)
        }
    };
    let should_eval = |round: usize| round.is_multiple_of(cfg.eval_every) || round == total;

    let mut params = init;
    let mut state = StrategyState::new(cfg.strategy, params.len());
    let mut logs = Vec::with_capacity(total);
    let mut transfers: u64 = 0;

    for round in 1..=p1.rounds {
        let input_fingerprint = params.fingerprint();
        let (next, cr) = cyclic_round(task, params, devices, &cfg.hp, &p1, round, lr_for(round))?;
        params = next;
        // each visit: model down to the device and back up
        transfers += 2 * cr.visits.len() as u64;
        let mut log = RoundLog {
            round,
            phase: Phase::P1,
            sampled: cr.sampled(),
            train_loss: cr.mean_loss(),
            test_acc: None,
            test_loss: None,
            grad_norm_sq: None,
            cum_comm_units: transfers as f64,
            input_fingerprint,
            output_fingerprint: params.fingerprint(),
        };
        if should_eval(round) {
            evaluate_round(task, &params, &mut log)?;
        }
        on_round(&log);
        logs.push(log);
    }
    let pretrained = (p1.rounds > 0).then(|| params.clone());

    let s_p = cfg.p2_devices_per_round();
    for round in p1.rounds + 1..=total {
        let sampled = random_sample(cfg.m, s_p, cfg.seed, round)?;
        let ctx = LocalContext {
            round,
            lr: lr_for(round),
            seed: cfg.seed,
            steps_cap: cfg.steps_cap,
        };
        let global = &params;
        let st = &state;
        let update = |&device: &usize| -> Result<LocalOutcome> {
            local_update(task, cfg.strategy, device, &devices[device], global, &cfg.hp, st, ctx)
        };
        let outcomes: Vec<Result<LocalOutcome>> = match &pool {
            Some(pool) => pool.install(|| sampled.par_iter().map(update).collect()),
            None => sampled.iter().map(update).collect(),
        };
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

        let contribs: Vec<(&[f64], f64)> = outcomes
            .iter()
            .zip(&sampled)
            .map(|(o, &d)| (&o.params[..], devices[d].len() as f64))
            .collect();
        let next = aggregate(&contribs)?;

        let total_steps: usize = outcomes.iter().map(|o| o.steps).sum();
        let train_loss = if total_steps == 0 {
            0.0
        } else {
            outcomes.iter().map(|o| o.mean_loss * o.steps as f64).sum::<f64>() / total_steps as f64
        };

        match cfg.strategy {
            StrategyKind::Scaffold => {
                let mut old = BTreeMap::new();
                for (o, &d) in outcomes.iter().zip(&sampled) {
                    if let Some(prev) = state.c_client.get(&d) {
                        old.insert(d, prev.clone());
                    }
                    if let Some(cv) = &o.client_variate {
                        state.c_client.insert(d, cv.clone());
                    }
                }
                scaffold_server_update(&mut state, &sampled, &old, cfg.m);
            }
            StrategyKind::Moon => {
                for (o, &d) in outcomes.iter().zip(&sampled) {
                    state.prev_local.insert(d, o.params.clone());
                }
            }
            StrategyKind::FedAvg | StrategyKind::FedProx => {}
        }

        let input_fingerprint = params.fingerprint();
        params = next;
        transfers += cfg.strategy.transfers_per_participant() * s_p as u64;
        let mut log = RoundLog {
            round,
            phase: Phase::P2,
            sampled,
            train_loss,
            test_acc: None,
            test_loss: None,
            grad_norm_sq: None,
            cum_comm_units: transfers as f64,
            input_fingerprint,
            output_fingerprint: params.fingerprint(),
        };
        if should_eval(round) {
            evaluate_round(task, &params, &mut log)?;
        }
        on_round(&log);
        logs.push(log);
    }

    Ok(ExperimentOutcome {
        final_params: params,
        pretrained,
        logs,
        state,
    })
}

/// First evaluated round whose held-out accuracy reaches `target`.
pub fn rounds_to_target(logs: &[RoundLog], target: f64) -> Option<usize> {
    logs.iter()
        .find(|l| l.test_acc.is_some_and(|a| a >= target))
        .map(|l| l.round)
}

/// Highest held-out accuracy and the round it was first reached.
pub fn max_accuracy(logs: &[RoundLog]) -> Option<(f64, usize)> {
    logs.iter()
        .filter_map(|l| l.test_acc.map(|a| (a, l.round)))
        .fold(None, |best, (a, r)| match best {
            Some((b, _)) if b >= a => best,
            _ => Some((a, r)),
        })
}

/// `min_{t ≤ T} ‖∇ℓ(w_t)‖²` for every evaluated round `T`.
pub fn running_min_grad_norm(logs: &[RoundLog]) -> Vec<(usize, f64)> {
    let mut best = f64::INFINITY;
    logs.iter()
        .filter_map(|l| {
            l.grad_norm_sq.map(|g| {
                best = best.min(g);
                (l.round, best)
            })
        })
        .collect()
}

/// Closed-form communication of a whole experiment in units of `X`:
///
/// | strategy                 | without pre-training | with pre-training            |
/// |--------------------------|----------------------|------------------------------|
/// | FedAvg / FedProx / Moon  | `2 S_p T_total X`    | `2 (S_c T_c + S_p T_res) X`  |
/// | SCAFFOLD                 | `4 S_p T_total X`    | `2 (S_c T_c + 2 S_p T_res) X`|
pub fn comm_units_total(cfg: &ExperimentConfig, model_units: f64) -> f64 {
    let s_p = cfg.p2_devices_per_round() as f64;
    let s_c = cfg.p1.devices_per_round as f64;
    let t_c = cfg.p1.rounds as f64;
    let t_res = cfg.p2_rounds as f64;
    let t_total = cfg.total_rounds() as f64;
    let units = match (cfg.strategy, cfg.p1.rounds > 0) {
        (StrategyKind::Scaffold, false) => 4.0 * s_p * t_total,
        (_, false) => 2.0 * s_p * t_total,
        (StrategyKind::Scaffold, true) => 2.0 * (s_c * t_c + 2.0 * s_p * t_res),
        (_, true) => 2.0 * (s_c * t_c + s_p * t_res),
    };
    units * model_units
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dirichlet_partition, synth_blobs, synth_quadratics};
    use crate::nn::Activation;
    use crate::task::QuadraticTask;

    fn reference_cfg(strategy: StrategyKind, t_c: usize) -> ExperimentConfig {
        ExperimentConfig {
            p1: CyclicConfig { rounds: t_c, ..Default::default() },
            p2_rounds: 1000 - t_c,
            strategy,
            ..Default::default()
        }
    }

    #[test]
    fn closed_form_communication() {
        assert_eq!(comm_units_total(&reference_cfg(StrategyKind::FedAvg, 0), 1.0), 20000.0);
        assert_eq!(comm_units_total(&reference_cfg(StrategyKind::FedAvg, 100), 1.0), 23000.0);
        assert_eq!(comm_units_total(&reference_cfg(StrategyKind::Scaffold, 0), 1.0), 40000.0);
        assert_eq!(comm_units_total(&reference_cfg(StrategyKind::Scaffold, 100), 1.0), 41000.0);
        assert_eq!(comm_units_total(&reference_cfg(StrategyKind::Moon, 100), 2.5), 57500.0);
    }

    #[test]
    fn fraction_rounding() {
        assert_eq!(devices_for_fraction(0.10, 100), 10);
        assert_eq!(devices_for_fraction(0.25, 100), 25);
        assert_eq!(devices_for_fraction(0.10, 20), 2);
        assert_eq!(devices_for_fraction(0.15, 20), 3);
        assert_eq!(devices_for_fraction(0.01, 20), 1);
        assert_eq!(devices_for_fraction(1.0, 7), 7);
    }

    #[test]
    fn rounds_to_target_fixture() {
        let mk = |round, acc| RoundLog {
            round,
            phase: Phase::P2,
            sampled: vec![],
            train_loss: 0.0,
            test_acc: acc,
            test_loss: None,
            grad_norm_sq: None,
            cum_comm_units: 0.0,
            input_fingerprint: 0,
            output_fingerprint: 0,
        };
        let logs = vec![mk(1, None), mk(2, Some(0.3)), mk(3, None), mk(4, Some(0.7)), mk(5, Some(0.6)), mk(6, Some(0.9))];
        assert_eq!(rounds_to_target(&logs, 0.0), Some(2));
        assert_eq!(rounds_to_target(&logs, 0.65), Some(4));
        assert_eq!(rounds_to_target(&logs, 0.9), Some(6));
        assert_eq!(rounds_to_target(&logs, 1.1), None);
        assert_eq!(max_accuracy(&logs), Some((0.9, 6)));
    }

    fn small_setup() -> (Dataset, Dataset, ModelSpec, Partition) {
        let ds = synth_blobs(4, 6, 60, 0.3, 1);
        let (train, test) = ds.split(0.25, 2).unwrap();
        let part = dirichlet_partition(&train, 8, 0.5, 3, 2).unwrap();
        (train, test, ModelSpec::new(6, vec![8], 4, Activation::Relu), part)
    }

    fn small_cfg(strategy: StrategyKind) -> ExperimentConfig {
        ExperimentConfig {
            m: 8,
            p1: CyclicConfig { rounds: 3, devices_per_round: 2, max_local_steps: 3, seed: 0 },
            p2_rounds: 4,
            p2_fraction: 0.25,
            strategy,
            hp: Hyperparams { lr: 0.1, local_epochs: 1, batch_size: 8, ..Default::default() },
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn counter_matches_closed_form_for_every_strategy() {
        let (train, test, spec, part) = small_setup();
        for strategy in StrategyKind::ALL {
            for t_c in [0, 3] {
                let mut cfg = small_cfg(strategy);
                cfg.p1.rounds = t_c;
                let out = run_experiment(&cfg, &spec, &train, &test, &part).unwrap();
                assert_eq!(out.logs.len(), cfg.total_rounds());
                assert_eq!(out.logs.last().unwrap().cum_comm_units, comm_units_total(&cfg, 1.0));
                assert!(out.logs.windows(2).all(|w| w[0].cum_comm_units <= w[1].cum_comm_units));
            }
        }
    }

    #[test]
    fn phase_seam_and_phase_tags() {
        let (train, test, spec, part) = small_setup();
        let cfg = small_cfg(StrategyKind::FedAvg);
        let out = run_experiment(&cfg, &spec, &train, &test, &part).unwrap();
        let w_wg = out.pretrained.as_ref().unwrap();
        let first_p2 = out.logs.iter().find(|l| l.phase == Phase::P2).unwrap();
        assert_eq!(first_p2.round, 4);
        assert_eq!(first_p2.input_fingerprint, w_wg.fingerprint());
        assert_eq!(out.logs.iter().filter(|l| l.phase == Phase::P1).count(), 3);
        for l in &out.logs {
            let mut s = l.sampled.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), l.sampled.len());
        }

        let mut baseline = cfg.clone();
        baseline.p1.rounds = 0;
        let out = run_experiment(&baseline, &spec, &train, &test, &part).unwrap();
        assert!(out.pretrained.is_none());
        assert!(out.logs.iter().all(|l| l.phase == Phase::P2));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (train, test, spec, part) = small_setup();
        for strategy in StrategyKind::ALL {
            let mut cfg = small_cfg(strategy);
            cfg.p2_fraction = 0.5;
            let serial = run_experiment(&cfg, &spec, &train, &test, &part).unwrap();
            cfg.threads = 4;
            let parallel = run_experiment(&cfg, &spec, &train, &test, &part).unwrap();
            assert_eq!(serial.final_params, parallel.final_params);
            assert_eq!(serial.logs, parallel.logs);
        }
    }

    #[test]
    fn eval_cadence() {
        let (train, test, spec, part) = small_setup();
        let mut cfg = small_cfg(StrategyKind::FedProx);
        cfg.eval_every = 3;
        let out = run_experiment(&cfg, &spec, &train, &test, &part).unwrap();
        let evaluated: Vec<usize> = out.logs.iter().filter(|l| l.test_acc.is_some()).map(|l| l.round).collect();
        assert_eq!(evaluated, vec![3, 6, 7]);
        let mins = running_min_grad_norm(&out.logs);
        assert!(mins.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn scaffold_beats_fedavg_on_heterogeneous_quadratics() {
        let q = synth_quadratics(10, 5, 1.0, 3).unwrap();
        let task = QuadraticTask::new(q.clone());
        let devices: Vec<Vec<usize>> = (0..10).map(|i| (i * 8..i * 8 + 8).collect()).collect();
        let run = |strategy| {
            let cfg = ExperimentConfig {
                m: 10,
                p1: CyclicConfig { rounds: 0, ..Default::default() },
                p2_rounds: 150,
                p2_fraction: 1.0,
                strategy,
                hp: Hyperparams { lr: 0.1, lr_decay_per_round: 1.0, batch_size: 1, ..Default::default() },
                steps_cap: Some(5),
                seed: 1,
                ..Default::default()
            };
            let out = run_federated(&task, &cfg, &devices, ParamVector::zeros(5), |_| {}).unwrap();
            q.distance_to_optimum(&out.final_params)
        };
        let fedavg = run(StrategyKind::FedAvg);
        let scaffold = run(StrategyKind::Scaffold);
        assert!(scaffold < fedavg, "scaffold {scaffold} fedavg {fedavg}");
        assert!(scaffold < 1e-6);
    }

    #[test]
    fn exploding_models_report_divergence() {
        let (train, test, spec, part) = small_setup();
        let mut cfg = small_cfg(StrategyKind::FedAvg);
        cfg.hp.lr = 1e150;
        let err = run_experiment(&cfg, &spec, &train, &test, &part).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn configuration_errors() {
        let (train, test, spec, part) = small_setup();
        let mut cfg = small_cfg(StrategyKind::FedAvg);
        cfg.m = 9;
        assert!(run_experiment(&cfg, &spec, &train, &test, &part).is_err());
        let mut cfg = small_cfg(StrategyKind::FedAvg);
        cfg.p2_fraction = 0.0;
        assert!(cfg.validate().is_err());
        cfg.p2_fraction = 1.5;
        assert!(cfg.validate().is_err());
    }
}
