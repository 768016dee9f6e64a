//! A deterministic federated-learning simulator with cyclic pre-training.
//!
//! Training runs in two phases. In the first, a single model travels from
//! device to device, each one taking a few SGD steps on its local data
//! before passing the model on. In the second, sampled devices train in
//! parallel from the current global model and the server aggregates them
//! with FedAvg, FedProx, SCAFFOLD or Moon.
//!
//! ```
//! use cyclicfl::data::{dirichlet_partition, synth_blobs};
//! use cyclicfl::nn::{Activation, ModelSpec};
//! use cyclicfl::orchestrator::{run_experiment, ExperimentConfig};
//!
//! let data = synth_blobs(3, 4, 40, 0.3, 7);
//! let (train, test) = data.split(0.25, 7).unwrap();
//! let partition = dirichlet_partition(&train, 6, 0.5, 7, 1).unwrap();
//! let spec = ModelSpec::new(4, vec![8], 3, Activation::Relu);
//!
//! let mut cfg = ExperimentConfig::default();
//! cfg.m = 6;
//! cfg.p1.rounds = 2;
//! cfg.p1.devices_per_round = 2;
//! cfg.p2_rounds = 3;
//! cfg.p2_fraction = 0.5;
//!
//! let out = run_experiment(&cfg, &spec, &train, &test, &partition).unwrap();
//! assert_eq!(out.logs.len(), 5);
//! ```

pub mod checkpoint;
pub mod cyclic;
pub mod data;
pub mod error;
pub mod landscape;
pub mod nn;
pub mod orchestrator;
pub mod rng;
pub mod strategies;
pub mod task;
pub mod theory;

pub use error::{Error, Result};
pub use nn::{ModelSpec, ParamVector};
pub use strategies::{Hyperparams, StrategyKind};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/nn.md")]
    mod nn {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/strategies.md")]
    mod strategies {}
    #[doc = include_str!("../../../book/src/cyclic.md")]
    mod cyclic {}
    #[doc = include_str!("../../../book/src/orchestrator.md")]
    mod orchestrator {}
    #[doc = include_str!("../../../book/src/consistency.md")]
    mod consistency {}
    #[doc = include_str!("../../../book/src/landscape.md")]
    mod landscape {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
