//! Datasets, non-IID partitioning and per-device batch streams.

mod io;
mod partition;
mod stream;
mod synth;

pub use io::{load_csv, load_idx, CsvOptions};
pub use partition::{dirichlet_partition, label_entropy, mean_label_entropy, Partition, MAX_PARTITION_RETRIES};
pub use stream::{batches_per_epoch, BatchStream};
pub use synth::{synth_blobs, synth_quadratics, QuadraticProblem};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng;

/// Labelled samples stored as a row-major `len × dim` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidConfig("dataset must contain at least one sample".into()));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidConfig(format!("label {bad} out of range for {num_classes} classes")));
        }
        if features.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Gather the given sample indices into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::DimensionMismatch(format!("sample index {i} out of range")));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, labels, self.dim)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let batch = self.batch(indices)?;
        Dataset::new(batch.features().to_vec(), batch.labels().to_vec(), self.dim, self.num_classes)
    }

    /// Shuffle once with `seed` and split off `test_fraction` of the samples.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!("test fraction {test_fraction} not in (0, 1)")));
        }
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        if n_test == 0 || n_test >= self.len() {
            return Err(Error::InvalidConfig("split leaves an empty side".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, "split", &[]));
        let (test, train) = order.split_at(n_test);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}
