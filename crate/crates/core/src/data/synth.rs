use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Gaussian clusters around unit-norm random class centers.
///
/// Samples are emitted class by class; `spread` is the per-coordinate
/// standard deviation around each center.
pub fn synth_blobs(num_classes: usize, d: usize, per_class: usize, spread: f64, seed: u64) -> Dataset {
    assert!(num_classes >= 1 && d >= 1 && per_class >= 1, "counts must be at least 1");
    let mut rng = rng::stream(seed, "blobs", &[]);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| loop {
            let c: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break c.into_iter().map(|v| v / norm).collect();
            }
        })
        .collect();
    let mut features = Vec::with_capacity(num_classes * per_class * d);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(c + spread * z);
            }
            labels.push(class);
        }
    }
    Dataset::new(features, labels, d, num_classes.max(2)).expect("generated dataset is well-formed")
}

/// Per-client separable quadratics `f_i(w) = ½ Σ_k a_ik (w_k − b_ik)²`.
///
/// The minimizer of the uniform average `(1/m) Σ_i f_i` is available in
/// closed form, `w*_k = Σ_i a_ik b_ik / Σ_i a_ik`, which makes these
/// objectives an exact oracle for convergence tests.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    pub targets: Vec<Vec<f64>>,
    pub curvatures: Vec<Vec<f64>>,
    pub optimum: Vec<f64>,
}

impl QuadraticProblem {
    /// Unit-curvature clients `½‖w − b_i‖²`; the optimum is `mean(b_i)`.
    pub fn from_targets(targets: Vec<Vec<f64>>) -> Result<Self> {
        let curvatures = targets.iter().map(|b| vec![1.0; b.len()]).collect();
        Self::new(targets, curvatures)
    }

    pub fn new(targets: Vec<Vec<f64>>, curvatures: Vec<Vec<f64>>) -> Result<Self> {
        let d = targets.first().map(Vec::len).unwrap_or(0);
        if targets.is_empty() || d == 0 {
            return Err(Error::InvalidConfig("need at least one client of positive dimension".into()));
        }
        if curvatures.len() != targets.len()
            || targets.iter().chain(&curvatures).any(|v| v.len() != d)
        {
            return Err(Error::DimensionMismatch("targets and curvatures must share shape".into()));
        }
        if curvatures.iter().flatten().any(|&a| !(a > 0.0)) {
            return Err(Error::InvalidConfig("curvatures must be positive".into()));
        }
        let optimum = (0..d)
            .map(|k| {
                let num: f64 = targets.iter().zip(&curvatures).map(|(b, a)| a[k] * b[k]).sum();
                let den: f64 = curvatures.iter().map(|a| a[k]).sum();
                num / den
            })
            .collect();
        Ok(Self {
            targets,
            curvatures,
            optimum,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.targets.len()
    }

    pub fn dim(&self) -> usize {
        self.optimum.len()
    }

    pub fn client_loss(&self, i: usize, w: &[f64]) -> f64 {
        w.iter()
            .zip(&self.targets[i])
            .zip(&self.curvatures[i])
            .map(|((w, b), a)| 0.5 * a * (w - b) * (w - b))
            .sum()
    }

    pub fn client_grad(&self, i: usize, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(&self.targets[i])
            .zip(&self.curvatures[i])
            .map(|((w, b), a)| a * (w - b))
            .collect()
    }

    pub fn global_loss(&self, w: &[f64]) -> f64 {
        (0..self.num_clients()).map(|i| self.client_loss(i, w)).sum::<f64>() / self.num_clients() as f64
    }

    pub fn global_grad(&self, w: &[f64]) -> Vec<f64> {
        let m = self.num_clients() as f64;
        (0..self.dim())
            .map(|k| {
                (0..self.num_clients())
                    .map(|i| self.curvatures[i][k] * (w[k] - self.targets[i][k]))
                    .sum::<f64>()
                    / m
            })
            .collect()
    }

    pub fn distance_to_optimum(&self, w: &[f64]) -> f64 {
        w.iter()
            .zip(&self.optimum)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// `m` heterogeneous quadratic clients in `d` dimensions.
///
/// Targets are `c + heterogeneity · ξ_i` around a shared random center `c`;
/// per-coordinate curvatures are drawn uniformly from
/// `[1 − 0.8h, 1 + 0.8h]` with `h = min(heterogeneity, 1)`. With
/// `heterogeneity = 0` every client is the same unit-curvature bowl.
pub fn synth_quadratics(m: usize, d: usize, heterogeneity: f64, seed: u64) -> Result<QuadraticProblem> {
    if m < 2 || d == 0 {
        return Err(Error::InvalidConfig("synth_quadratics needs m >= 2 and d >= 1".into()));
    }
    if !(heterogeneity >= 0.0) {
        return Err(Error::InvalidConfig("heterogeneity must be non-negative".into()));
    }
    let mut rng = rng::stream(seed, "quadratics", &[]);
    let center: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let h = heterogeneity.min(1.0);
    let mut targets = Vec::with_capacity(m);
    let mut curvatures = Vec::with_capacity(m);
    for _ in 0..m {
        targets.push(
            center
                .iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + heterogeneity * z
                })
                .collect(),
        );
        curvatures.push((0..d).map(|_| 1.0 + 0.8 * h * rng.random_range(-1.0..=1.0)).collect());
    }
    QuadraticProblem::new(targets, curvatures)
}
