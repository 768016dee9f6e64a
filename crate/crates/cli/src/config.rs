use std::fs;
use std::path::{Path, PathBuf};

use cyclicfl::cyclic::CyclicConfig;
use cyclicfl::landscape::{Normalization, SliceSpec};
use cyclicfl::nn::Activation;
use cyclicfl::orchestrator::{devices_for_fraction, ExperimentConfig};
use cyclicfl::{Hyperparams, StrategyKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
    pub data: DataSource,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub federated: FederatedConfig,
    pub hyper: Hyperparams,
    pub consistency: ConsistencyConfig,
    pub landscape: LandscapeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            threads: 1,
            data: DataSource::default(),
            partition: PartitionConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            federated: FederatedConfig::default(),
            hyper: Hyperparams::default(),
            consistency: ConsistencyConfig::default(),
            landscape: LandscapeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Blobs(BlobsSource),
    Csv(CsvSource),
    Idx(IdxSource),
    Quadratics(QuadraticsSource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Blobs(BlobsSource::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsSource {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub test_fraction: f64,
}

impl Default for BlobsSource {
    fn default() -> Self {
        BlobsSource { classes: 10, dim: 20, per_class: 600, spread: 0.5, test_fraction: 1.0 / 6.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSource {
    pub train: PathBuf,
    /// Held-out file; without one, `test_fraction` of `train` is split off.
    pub test: Option<PathBuf>,
    pub skip_header: bool,
    pub num_classes: Option<usize>,
    pub test_fraction: f64,
}

impl Default for CsvSource {
    fn default() -> Self {
        CsvSource { train: PathBuf::new(), test: None, skip_header: false, num_classes: None, test_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub test_fraction: f64,
}

impl Default for IdxSource {
    fn default() -> Self {
        IdxSource {
            train_images: PathBuf::new(),
            train_labels: PathBuf::new(),
            test_images: None,
            test_labels: None,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticsSource {
    pub dim: usize,
    pub heterogeneity: f64,
}

impl Default for QuadraticsSource {
    fn default() -> Self {
        QuadraticsSource { dim: 5, heterogeneity: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub devices: usize,
    pub beta: f64,
    pub min_per_client: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig { devices: 100, beta: 0.5, min_per_client: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![32], activation: Activation::Relu }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Share of devices visited per pre-training round.
    pub fraction: f64,
    pub rounds: usize,
    pub max_local_steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { fraction: 0.25, rounds: 100, max_local_steps: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederatedConfig {
    pub strategy: StrategyKind,
    pub fraction: f64,
    /// Rounds over both phases; federated training gets what pre-training leaves.
    pub total_rounds: usize,
    pub eval_every: usize,
    pub local_steps_cap: Option<usize>,
    pub target_accuracy: Option<f64>,
    pub reset_lr_after_p1: bool,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        FederatedConfig {
            strategy: StrategyKind::FedAvg,
            fraction: 0.10,
            total_rounds: 1000,
            eval_every: 1,
            local_steps_cap: None,
            target_accuracy: None,
            reset_lr_after_p1: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub probe_size: usize,
    pub ridge: f64,
    pub positive_class: Option<usize>,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig { probe_size: 128, ridge: cyclicfl::theory::DEFAULT_RIDGE, positive_class: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub resolution: usize,
    pub range: f64,
    pub normalization: Normalization,
    /// Direction seed; the run seed when absent.
    pub seed: Option<u64>,
    pub probe_size: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        let s = SliceSpec::default();
        LandscapeConfig {
            resolution: s.resolution,
            range: s.range,
            normalization: s.normalization,
            seed: None,
            probe_size: 256,
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Missing(PathBuf),
    Unreadable(PathBuf, std::io::Error),
    Parse(PathBuf, String),
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Missing(p) => write!(f, "config file not found: {}", p.display()),
            ConfigError::Unreadable(p, e) => write!(f, "cannot read config {}: {e}", p.display()),
            ConfigError::Parse(p, e) => write!(f, "cannot parse config {}: {}", p.display(), e.trim()),
            ConfigError::Invalid(msg) => write!(f, "{msg}"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ConfigError::Missing(path.to_path_buf()),
            _ => ConfigError::Unreadable(path.to_path_buf(), e),
        })?;
        Self::parse(&text).map_err(|e| ConfigError::Parse(path.to_path_buf(), e))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Give `rounds` to pre-training and keep the total number of rounds.
    pub fn set_pretrain_rounds(&mut self, rounds: usize) -> Result<(), ConfigError> {
        if rounds > self.federated.total_rounds {
            return Err(ConfigError::Invalid(format!(
                "pre-training rounds {rounds} exceed total_rounds {}",
                self.federated.total_rounds
            )));
        }
        self.pretrain.rounds = rounds;
        Ok(())
    }

    pub fn experiment(&self) -> Result<ExperimentConfig, ConfigError> {
        let m = self.partition.devices;
        if self.pretrain.rounds > self.federated.total_rounds {
            return Err(ConfigError::Invalid(format!(
                "pretrain.rounds {} exceed federated.total_rounds {}",
                self.pretrain.rounds, self.federated.total_rounds
            )));
        }
        if !(self.pretrain.fraction > 0.0 && self.pretrain.fraction <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "pretrain.fraction must lie in (0, 1], got {}",
                self.pretrain.fraction
            )));
        }
        let cfg = ExperimentConfig {
            m,
            p1: CyclicConfig {
                rounds: self.pretrain.rounds,
                devices_per_round: devices_for_fraction(self.pretrain.fraction, m),
                max_local_steps: self.pretrain.max_local_steps,
                seed: self.seed,
            },
            p2_rounds: self.federated.total_rounds - self.pretrain.rounds,
            p2_fraction: self.federated.fraction,
            strategy: self.federated.strategy,
            hp: self.hyper.clone(),
            steps_cap: self.federated.local_steps_cap,
            eval_every: self.federated.eval_every,
            target_accuracy: self.federated.target_accuracy,
            seed: self.seed,
            reset_lr_after_p1: self.federated.reset_lr_after_p1,
            threads: self.threads,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn slice_spec(&self) -> Result<SliceSpec, ConfigError> {
        let spec = SliceSpec {
            resolution: self.landscape.resolution,
            range: self.landscape.range,
            normalization: self.landscape.normalization,
            seed: self.landscape.seed.unwrap_or(self.seed),
        };
        spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let cfg = RunConfig::default();
        let exp = cfg.experiment().unwrap();
        assert_eq!(exp.m, 100);
        assert_eq!(exp.p1.devices_per_round, 25);
        assert_eq!(exp.p1.rounds, 100);
        assert_eq!(exp.p1.max_local_steps, 20);
        assert_eq!(exp.p2_devices_per_round(), 10);
        assert_eq!(exp.total_rounds(), 1000);
        assert_eq!(exp.hp.lr, 0.01);
        assert_eq!(exp.hp.lr_decay_per_round, 0.998);
        assert_eq!(exp.hp.local_epochs, 5);
        assert_eq!(exp.hp.batch_size, 32);
        assert_eq!(exp.hp.mu_prox, 0.01);
        assert_eq!(exp.hp.tau_moon, 0.5);
        assert_eq!(exp.hp.mu_moon, 0.1);
    }

    #[test]
    fn empty_file_is_the_default_and_round_trips() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        let mut cfg = RunConfig::default();
        cfg.data = DataSource::Quadratics(QuadraticsSource { dim: 3, heterogeneity: 0.5 });
        cfg.federated.target_accuracy = Some(0.6);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::parse(
            "seed = 4\n[data]\nkind = \"blobs\"\nclasses = 3\n[hyper]\nlr = 0.05\n[federated]\nstrategy = \"scaffold\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.data, DataSource::Blobs(BlobsSource { classes: 3, ..BlobsSource::default() }));
        assert_eq!(cfg.hyper.lr, 0.05);
        assert_eq!(cfg.hyper.batch_size, 32);
        assert_eq!(cfg.federated.strategy, StrategyKind::Scaffold);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sede = 4").is_err());
        assert!(RunConfig::parse("[hyper]\nrate = 0.1").is_err());
    }

    #[test]
    fn pretrain_override_keeps_the_total() {
        let mut cfg = RunConfig::default();
        cfg.set_pretrain_rounds(0).unwrap();
        let exp = cfg.experiment().unwrap();
        assert_eq!((exp.p1.rounds, exp.p2_rounds), (0, 1000));
        assert!(cfg.set_pretrain_rounds(1001).is_err());
    }
}
