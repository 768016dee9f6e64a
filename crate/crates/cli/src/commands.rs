use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cyclicfl::checkpoint;
use cyclicfl::cyclic::pretraining_devices;
use cyclicfl::data::{self, dirichlet_partition, label_entropy, synth_blobs, synth_quadratics, Dataset, Partition, QuadraticProblem};
use cyclicfl::landscape::{self, sharpness};
use cyclicfl::nn::{init_params, ModelSpec};
use cyclicfl::orchestrator::{
    comm_units_total, max_accuracy, rounds_to_target, run_federated, ExperimentOutcome, RoundLog, DEFAULT_PROBE_SIZE,
};
use cyclicfl::rng::derive_seed;
use cyclicfl::task::{MlpTask, QuadraticTask};
use cyclicfl::theory::consistency_from_partition;
use cyclicfl::{Error, ParamVector, StrategyKind};
use serde::Serialize;

use crate::config::{ConfigError, DataSource, RunConfig};

#[derive(Debug)]
pub enum CmdError {
    Config(String),
    Divergence(String),
    Other(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(_) => 2,
            CmdError::Divergence(_) => 3,
            CmdError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CmdError::Config(_) => "config",
            CmdError::Divergence(_) => "divergence",
            CmdError::Other(_) => "runtime",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CmdError::Config(m) | CmdError::Divergence(m) | CmdError::Other(m) => m,
        }
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Config(e.to_string())
    }
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } => CmdError::Divergence(e.to_string()),
            Error::InvalidConfig(_) | Error::InfeasiblePartition { .. } => CmdError::Config(e.to_string()),
            _ => CmdError::Other(e.to_string()),
        }
    }
}

type CmdResult<T = ()> = Result<T, CmdError>;

fn io_err(path: &Path, e: impl fmt::Display) -> CmdError {
    CmdError::Other(format!("{}: {e}", path.display()))
}

/// Write through a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CmdResult {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

/// Everything a command needs once the data source is materialized.
pub enum Workload {
    Classification {
        train: Dataset,
        test: Dataset,
        partition: Partition,
        model: ModelSpec,
    },
    Quadratic {
        problem: QuadraticProblem,
    },
}

impl Workload {
    pub fn load(cfg: &RunConfig) -> CmdResult<Self> {
        let m = cfg.partition.devices;
        let (train, test) = match &cfg.data {
            DataSource::Quadratics(q) => {
                let problem = synth_quadratics(m, q.dim, q.heterogeneity, cfg.seed)?;
                return Ok(Workload::Quadratic { problem });
            }
            DataSource::Blobs(b) => {
                let all = synth_blobs(b.classes, b.dim, b.per_class, b.spread, derive_seed(cfg.seed, "data", &[]));
                all.split(b.test_fraction, cfg.seed)?
            }
            DataSource::Csv(c) => {
                let opts = data::CsvOptions { skip_header: c.skip_header, num_classes: c.num_classes };
                let train = data::load_csv(&c.train, opts)?;
                match &c.test {
                    Some(path) => align_classes(train, data::load_csv(path, opts)?)?,
                    None => train.split(c.test_fraction, cfg.seed)?,
                }
            }
            DataSource::Idx(x) => {
                let train = data::load_idx(&x.train_images, &x.train_labels)?;
                match (&x.test_images, &x.test_labels) {
                    (Some(i), Some(l)) => align_classes(train, data::load_idx(i, l)?)?,
                    (None, None) => train.split(x.test_fraction, cfg.seed)?,
                    _ => return Err(CmdError::Config("idx test images and labels must be given together".into())),
                }
            }
        };
        let partition = dirichlet_partition(&train, m, cfg.partition.beta, cfg.seed, cfg.partition.min_per_client)?;
        let model = ModelSpec::new(train.dim(), cfg.model.hidden.clone(), train.num_classes(), cfg.model.activation);
        model.validate()?;
        Ok(Workload::Classification { train, test, partition, model })
    }
}

fn align_classes(train: Dataset, test: Dataset) -> CmdResult<(Dataset, Dataset)> {
    if train.dim() != test.dim() {
        return Err(CmdError::Config(format!(
            "train has {} features per sample, test has {}",
            train.dim(),
            test.dim()
        )));
    }
    let k = train.num_classes().max(test.num_classes());
    let rebuild = |d: Dataset| Dataset::new(d.features().to_vec(), d.labels().to_vec(), d.dim(), k);
    Ok((rebuild(train)?, rebuild(test)?))
}

/// Quadratic clients carry one pseudo-sample each, so a local epoch is a single step.
fn quadratic_devices(m: usize) -> Vec<Vec<usize>> {
    (0..m).map(|_| vec![0]).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

pub fn rounds_csv(logs: &[RoundLog]) -> String {
    let mut out = String::from("round,phase,sampled_count,train_loss,test_acc,grad_norm_sq,cum_comm_units\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{:.16e},{},{},{}\n",
            l.round,
            l.phase,
            l.sampled.len(),
            l.train_loss,
            fmt_opt(l.test_acc),
            fmt_opt(l.grad_norm_sq),
            l.cum_comm_units
        ));
    }
    out
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub pretrain_rounds: usize,
    pub total_rounds: usize,
    pub max_accuracy: Option<f64>,
    pub argmax_round: Option<usize>,
    pub target_accuracy: Option<f64>,
    pub rounds_to_target: Option<usize>,
    pub final_train_loss: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub distance_to_optimum: Option<f64>,
    pub comm_units: f64,
    pub comm_units_closed_form: f64,
    pub wall_time_secs: f64,
}

pub struct RunArtifacts {
    pub dir: PathBuf,
    pub summary: Summary,
}

pub fn run(cfg: &RunConfig) -> CmdResult<RunArtifacts> {
    let exp = cfg.experiment()?;
    let started = Instant::now();
    let workload = Workload::load(cfg)?;
    let init_seed = derive_seed(cfg.seed, "model", &[]);
    let (outcome, distance): (ExperimentOutcome, Option<f64>) = match &workload {
        Workload::Classification { train, test, partition, model } => {
            let task = MlpTask::new(model.clone(), train, Some(test), DEFAULT_PROBE_SIZE, cfg.seed)?;
            let out = run_federated(&task, &exp, &partition.assignments, init_params(model, init_seed), |_| {})?;
            (out, None)
        }
        Workload::Quadratic { problem } => {
            let task = QuadraticTask::new(problem.clone());
            let init = ParamVector::zeros(problem.dim());
            let out = run_federated(&task, &exp, &quadratic_devices(exp.m), init, |_| {})?;
            let d = problem.distance_to_optimum(&out.final_params);
            (out, Some(d))
        }
    };

    let dir = cfg.out.clone();
    write_atomic(&dir.join("rounds.csv"), rounds_csv(&outcome.logs).as_bytes())?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    write_atomic(&dir.join("model.bin"), &checkpoint::encode(&outcome.final_params))?;
    if let Some(pre) = &outcome.pretrained {
        write_atomic(&dir.join("pretrained.bin"), &checkpoint::encode(pre))?;
    }

    let logs = &outcome.logs;
    let best = max_accuracy(logs);
    let last_eval = logs.iter().rev().find(|l| l.test_loss.is_some());
    let summary = Summary {
        strategy: exp.strategy,
        seed: cfg.seed,
        pretrain_rounds: exp.p1.rounds,
        total_rounds: exp.total_rounds(),
        max_accuracy: best.map(|b| b.0),
        argmax_round: best.map(|b| b.1),
        target_accuracy: exp.target_accuracy,
        rounds_to_target: exp.target_accuracy.and_then(|t| rounds_to_target(logs, t)),
        final_train_loss: logs.last().map(|l| l.train_loss),
        final_test_loss: last_eval.and_then(|l| l.test_loss),
        distance_to_optimum: distance,
        comm_units: logs.last().map_or(0.0, |l| l.cum_comm_units),
        comm_units_closed_form: comm_units_total(&exp, 1.0),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&dir.join("summary.json"), json.as_bytes())?;
    Ok(RunArtifacts { dir, summary })
}

fn units(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}X", v as i64)
    } else {
        format!("{v}X")
    }
}

/// Closed-form totals for every strategy with and without pre-training.
pub fn comm_table(cfg: &RunConfig) -> CmdResult<String> {
    let exp = cfg.experiment()?;
    let mut out = format!(
        "# m={} S_c={} T_c={} S_p={} T_total={}\n{:<10} {:>14} {:>14}\n",
        exp.m,
        exp.p1.devices_per_round,
        exp.p1.rounds,
        exp.p2_devices_per_round(),
        exp.total_rounds(),
        "strategy",
        "without_cyclic",
        "with_cyclic"
    );
    for kind in StrategyKind::ALL {
        let mut with = exp.clone();
        with.strategy = kind;
        let mut without = with.clone();
        without.p2_rounds = with.total_rounds();
        without.p1.rounds = 0;
        out.push_str(&format!(
            "{:<10} {:>14} {:>14}\n",
            kind.name(),
            units(comm_units_total(&without, 1.0)),
            units(comm_units_total(&with, 1.0))
        ));
    }
    Ok(out)
}

pub fn consistency(cfg: &RunConfig) -> CmdResult<String> {
    let exp = cfg.experiment()?;
    let Workload::Classification { train, partition, .. } = Workload::load(cfg)? else {
        return Err(CmdError::Config("consistency needs a labelled data source".into()));
    };
    let p1 = pretraining_devices(exp.m, &exp.p1_config())?;
    if p1.is_empty() {
        return Err(CmdError::Config("consistency needs at least one pre-training round".into()));
    }
    let c = &cfg.consistency;
    let r = consistency_from_partition(&train, &partition, &p1, c.probe_size, cfg.seed, c.ridge, c.positive_class)?;
    Ok(format!(
        "lambda_p={:.16e}\ndiscrepancy={:.16e}\npositive_class={}\nn_p={}\nn_q={}\npretrain_devices={}\n",
        r.lambda_p,
        r.discrepancy,
        r.positive_class.unwrap_or_default(),
        r.h_p.nrows(),
        r.h_q.nrows(),
        p1.len()
    ))
}

/// Slice around a checkpoint (the run's final model by default).
pub fn landscape(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> CmdResult<(PathBuf, f64)> {
    let spec = cfg.slice_spec()?;
    let path = checkpoint_path.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join("model.bin"));
    let params = checkpoint::load(&path).map_err(|e| CmdError::Config(e.to_string()))?;
    let grid = match Workload::load(cfg)? {
        Workload::Classification { train, model, .. } => {
            check_len(&path, params.len(), model.param_count())?;
            let task = MlpTask::new(model, &train, None, cfg.landscape.probe_size, cfg.seed)?;
            landscape::slice_task(&task, &params, &spec)?
        }
        Workload::Quadratic { problem } => {
            check_len(&path, params.len(), problem.dim())?;
            landscape::slice_task(&QuadraticTask::new(problem), &params, &spec)?
        }
    };
    let out = cfg.out.join("landscape.csv");
    write_atomic(&out, grid.to_csv_string().as_bytes())?;
    Ok((out, sharpness(&grid)))
}

fn check_len(path: &Path, have: usize, want: usize) -> CmdResult {
    if have != want {
        return Err(CmdError::Config(format!(
            "checkpoint {} holds {have} parameters, the configured model has {want}",
            path.display()
        )));
    }
    Ok(())
}

pub fn partition_stats(cfg: &RunConfig) -> CmdResult<String> {
    let Workload::Classification { train, partition, .. } = Workload::load(cfg)? else {
        return Err(CmdError::Config("partition-stats needs a labelled data source".into()));
    };
    let hists = partition.label_histograms(&train);
    let mut out = String::from("device,samples,label_entropy\n");
    for (d, h) in hists.iter().enumerate() {
        out.push_str(&format!("{d},{},{:.6}\n", h.iter().sum::<usize>(), label_entropy(h)));
    }
    out.push_str(&format!(
        "# beta={} mean_label_entropy={:.6}\n",
        partition.beta,
        data::mean_label_entropy(&partition, &train)
    ));
    Ok(out)
}
