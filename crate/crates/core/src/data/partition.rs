use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Whole-partition resampling attempts before giving up on `min_per_client`.
pub const MAX_PARTITION_RETRIES: usize = 100;

/// Assignment of dataset indices to devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// One ascending index list per device.
    pub assignments: Vec<Vec<usize>>,
    pub beta: f64,
    pub seed: u64,
}

impl Partition {
    pub fn num_devices(&self) -> usize {
        self.assignments.len()
    }

    /// `N_i` for every device.
    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    /// Per-device label histograms.
    pub fn label_histograms(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|idx| {
                let mut h = vec![0; ds.num_classes()];
                for &i in idx {
                    h[ds.labels()[i]] += 1;
                }
                h
            })
            .collect()
    }
}

fn dirichlet<R: Rng>(rng: &mut R, gamma: &Gamma<f64>, m: usize) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|g| g / sum).collect();
        }
    }
}

/// Split every class among `m` devices with proportions drawn from
/// `Dir(beta · 1_m)`; the whole partition is redrawn until every device
/// owns at least `min_per_client` samples.
pub fn dirichlet_partition(
    ds: &Dataset,
    m: usize,
    beta: f64,
    seed: u64,
    min_per_client: usize,
) -> Result<Partition> {
    if m == 0 {
        return Err(Error::InvalidConfig("need at least one device".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(format!("Dirichlet concentration must be positive, got {beta}")));
    }
    if m * min_per_client > ds.len() {
        return Err(Error::InfeasiblePartition {
            min_per_client,
            retries: 0,
        });
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }

    for attempt in 0..MAX_PARTITION_RETRIES {
        let mut rng = rng::stream(seed, "partition", &[attempt as u64]);
        let mut assignments = vec![Vec::new(); m];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let props = dirichlet(&mut rng, &gamma, m);
            let n = members.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (device, p) in props.iter().enumerate() {
                cum += p;
                let end = if device + 1 == m {
                    n
                } else {
                    ((cum * n as f64).floor() as usize).clamp(start, n)
                };
                assignments[device].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if assignments.iter().all(|a| a.len() >= min_per_client) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return Ok(Partition {
                assignments,
                beta,
                seed,
            });
        }
    }
    Err(Error::InfeasiblePartition {
        min_per_client,
        retries: MAX_PARTITION_RETRIES,
    })
}

/// Shannon entropy (nats) of a label histogram; empty histograms have zero entropy.
pub fn label_entropy(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

pub fn mean_label_entropy(partition: &Partition, ds: &Dataset) -> f64 {
    let hists = partition.label_histograms(ds);
    hists.iter().map(|h| label_entropy(h)).sum::<f64>() / hists.len() as f64
}
