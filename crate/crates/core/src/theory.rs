//! Data-consistency diagnostics based on the infinite-width ReLU Gram matrix.
//!
//! For unit-norm inputs the expected ReLU co-activation kernel has the
//! closed form
//!
//! ```text
//! H(x, x') = x·x' (π − arccos(x·x')) / (2π)
//! ```
//!
//! Given a pre-training set `P` and a target set `Q`, the labels `P`
//! induces on `Q` through kernel regression are
//! `y_{P→Q} = H_PQᵀ (H_P + ridge·I)⁻¹ y_P`, and the discrepancy
//! `‖y_Q − y_{P→Q}‖²` measures how well the pre-training data's labelling
//! carries over to the target data: the smaller it is, the flatter the loss
//! the pre-trained model lands in.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;

use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::rng;

/// Default ridge added to `H_P` before solving.
pub const DEFAULT_RIDGE: f64 = 1e-8;

fn normalized_rows(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = x.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let norm = row.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroNormRow(i));
        }
        row /= norm;
    }
    Ok(out)
}

/// Kernel entry for two unit vectors.
///
/// The angle comes from `2·atan2(‖a − b‖, ‖a + b‖)`, which equals
/// `arccos(a·b)` but stays accurate for nearly parallel or antipodal rows
/// where `arccos` of a rounded dot product loses half its digits.
fn kernel_entry(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut diff = 0.0;
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        diff += (x - y) * (x - y);
        sum += (x + y) * (x + y);
    }
    let dot = dot.clamp(-1.0, 1.0);
    let angle = 2.0 * diff.sqrt().atan2(sum.sqrt());
    dot * (PI - angle) / (2.0 * PI)
}

/// `H[i][j] = K(a_i, b_j)` over row-normalized inputs.
pub fn gram(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch("Gram inputs differ in feature dimension".into()));
    }
    let a = normalized_rows(a)?;
    let b = normalized_rows(b)?;
    let rows_a: Vec<Vec<f64>> = a.row_iter().map(|r| r.iter().copied().collect()).collect();
    let rows_b: Vec<Vec<f64>> = b.row_iter().map(|r| r.iter().copied().collect()).collect();
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| kernel_entry(&rows_a[i], &rows_b[j])))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(h.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramInputs {
    pub x_p: DMatrix<f64>,
    pub y_p: DVector<f64>,
    pub x_q: DMatrix<f64>,
    pub y_q: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub h_p: DMatrix<f64>,
    pub h_q: DMatrix<f64>,
    pub h_pq: DMatrix<f64>,
    /// Smallest eigenvalue of `H_P`, before the ridge.
    pub lambda_p: f64,
    pub y_transfer: DVector<f64>,
    /// `‖y_Q − y_{P→Q}‖²`.
    pub discrepancy: f64,
    /// One-vs-rest class used for ±1 labels, when built from a dataset.
    pub positive_class: Option<usize>,
}

pub fn consistency(inputs: &GramInputs, ridge: f64) -> Result<ConsistencyReport> {
    let GramInputs { x_p, y_p, x_q, y_q } = inputs;
    if x_p.nrows() == 0 || x_q.nrows() == 0 {
        return Err(Error::InvalidConfig("consistency needs at least one sample on each side".into()));
    }
    if y_p.len() != x_p.nrows() || y_q.len() != x_q.nrows() {
        return Err(Error::DimensionMismatch("one label per input row".into()));
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidConfig("ridge must be non-negative".into()));
    }
    let h_p = gram(x_p, x_p)?;
    let h_q = gram(x_q, x_q)?;
    let h_pq = gram(x_p, x_q)?;
    let lambda_p = min_eigenvalue(&h_p);

    let n = h_p.nrows();
    let regularized = &h_p + DMatrix::identity(n, n) * ridge;
    let max_diag = regularized.diagonal().max();
    let chol = regularized
        .cholesky()
        .ok_or_else(|| Error::Singular("H_P + ridge·I is not positive definite".into()))?;
    let min_pivot = chol.l_dirty().diagonal().iter().map(|d| d * d).fold(f64::INFINITY, f64::min);
    if min_pivot < 1e-13 * max_diag {
        return Err(Error::Singular(format!("smallest Cholesky pivot {min_pivot:e}")));
    }
    let alpha = chol.solve(y_p);
    let y_transfer = h_pq.transpose() * alpha;
    if y_transfer.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("non-finite transferred labels".into()));
    }
    let discrepancy = (y_q - &y_transfer).norm_squared();
    Ok(ConsistencyReport {
        h_p,
        h_q,
        h_pq,
        lambda_p,
        y_transfer,
        discrepancy,
        positive_class: None,
    })
}

/// `+1` for `positive_class`, `−1` otherwise.
pub fn binary_labels(labels: &[usize], positive_class: usize) -> DVector<f64> {
    DVector::from_iterator(labels.len(), labels.iter().map(|&y| if y == positive_class { 1.0 } else { -1.0 }))
}

/// Feature matrix of the given samples, one row each.
pub fn feature_matrix(ds: &Dataset, indices: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(indices.len(), ds.dim(), |i, k| ds.row(indices[i])[k])
}

fn most_frequent(labels: impl Iterator<Item = usize>, classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for y in labels {
        counts[y] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// Which samples went into `P` and `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencySample {
    pub p: Vec<usize>,
    pub q: Vec<usize>,
}

/// Draw `P` from the data of `p1_devices` and `Q` from the remaining samples.
pub fn consistency_sample(
    dataset: &Dataset,
    partition: &Partition,
    p1_devices: &[usize],
    probe_size: usize,
    seed: u64,
) -> Result<ConsistencySample> {
    if probe_size == 0 {
        return Err(Error::InvalidConfig("probe_size must be at least 1".into()));
    }
    let mut in_p = vec![false; dataset.len()];
    let mut pool: Vec<usize> = Vec::new();
    for &d in p1_devices {
        let owned = partition
            .assignments
            .get(d)
            .ok_or_else(|| Error::InvalidConfig(format!("no device {d} in the partition")))?;
        pool.extend_from_slice(owned);
    }
    pool.sort_unstable();
    pool.dedup();
    if pool.is_empty() {
        return Err(Error::InvalidConfig("pre-training devices own no samples".into()));
    }
    pool.shuffle(&mut rng::stream(seed, "consistency", &[0]));
    pool.truncate(probe_size);
    pool.sort_unstable();
    for &i in &pool {
        in_p[i] = true;
    }
    let mut rest: Vec<usize> = (0..dataset.len()).filter(|&i| !in_p[i]).collect();
    if rest.is_empty() {
        return Err(Error::InvalidConfig("no samples left for the target probe".into()));
    }
    rest.shuffle(&mut rng::stream(seed, "consistency", &[1]));
    rest.truncate(probe_size);
    rest.sort_unstable();
    Ok(ConsistencySample { p: pool, q: rest })
}

/// Data-consistency report for pre-training on `p1_devices`.
///
/// Labels become ±1 one-vs-rest on `positive_class`, defaulting to the most
/// frequent class of `Q` (lowest index on ties).
pub fn consistency_from_partition(
    dataset: &Dataset,
    partition: &Partition,
    p1_devices: &[usize],
    probe_size: usize,
    seed: u64,
    ridge: f64,
    positive_class: Option<usize>,
) -> Result<ConsistencyReport> {
    let sample = consistency_sample(dataset, partition, p1_devices, probe_size, seed)?;
    let labels = dataset.labels();
    let class = positive_class
        .unwrap_or_else(|| most_frequent(sample.q.iter().map(|&i| labels[i]), dataset.num_classes()));
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let inputs = GramInputs {
        x_p: feature_matrix(dataset, &sample.p),
        y_p: binary_labels(&pick(&sample.p), class),
        x_q: feature_matrix(dataset, &sample.q),
        y_q: binary_labels(&pick(&sample.q), class),
    };
    let mut report = consistency(&inputs, ridge)?;
    report.positive_class = Some(class);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dirichlet_partition, synth_blobs};
    use rand::Rng;

    fn random_rows(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::stream(seed, "theory-test", &[]);
        DMatrix::from_fn(n, d, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn closed_form_entries() {
        let e = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        let h = gram(&e, &e).unwrap();
        assert!((h[(0, 0)] - 0.5).abs() <= 1e-14);
        assert!(h[(0, 1)].abs() <= 1e-14);
        assert!(h[(0, 2)].abs() <= 1e-14);
        // 60 degrees: cos = 1/2, angle π/3 → (1/2)(2π/3)/(2π) = 1/6
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[0.5, 3f64.sqrt() / 2.0]);
        assert!((gram(&a, &b).unwrap()[(0, 0)] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn rows_are_normalized_and_zero_rows_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 0.3, 0.4]);
        let h = gram(&a, &a).unwrap();
        assert!((h[(0, 1)] - 0.5).abs() < 1e-14);
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(gram(&z, &z), Err(Error::ZeroNormRow(1))));
    }

    #[test]
    fn gram_is_symmetric_bounded_and_psd() {
        for seed in 0..5 {
            let x = random_rows(30, 8, seed);
            let h = gram(&x, &x).unwrap();
            for i in 0..30 {
                assert!((h[(i, i)] - 0.5).abs() < 1e-14);
                for j in 0..30 {
                    assert!((h[(i, j)] - h[(j, i)]).abs() <= 1e-14);
                    assert!(h[(i, j)].abs() <= 0.5 + 1e-15);
                }
            }
            assert!(min_eigenvalue(&h) >= -1e-10);
        }
    }

    #[test]
    fn identical_sets_transfer_exactly() {
        let x = random_rows(10, 20, 3);
        let y = DVector::from_fn(10, |i, _| if i % 3 == 0 { 1.0 } else { -1.0 });
        let inputs = GramInputs { x_p: x.clone(), y_p: y.clone(), x_q: x, y_q: y.clone() };
        let r = consistency(&inputs, 0.0).unwrap();
        assert!(r.discrepancy <= 1e-10, "{}", r.discrepancy);
        assert!((r.y_transfer - y).amax() < 1e-8);
        assert!(r.lambda_p > 0.0);
    }

    #[test]
    fn discrepancy_expansion() {
        let xp = random_rows(6, 4, 1);
        let xq = random_rows(5, 4, 2);
        let yp = DVector::from_vec(vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
        let probe = consistency(&GramInputs { x_p: xp.clone(), y_p: yp.clone(), x_q: xq.clone(), y_q: DVector::zeros(5) }, 1e-6).unwrap();
        let t = probe.y_transfer.clone();
        // a label vector orthogonal to the transferred one
        let mut yq = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5, 3.0]);
        yq -= &t * (yq.dot(&t) / t.dot(&t));
        let r = consistency(&GramInputs { x_p: xp, y_p: yp, x_q: xq, y_q: yq.clone() }, 1e-6).unwrap();
        assert_eq!(r.y_transfer, t);
        let expanded = yq.norm_squared() + t.norm_squared() - 2.0 * yq.dot(&t);
        assert!((r.discrepancy - expanded).abs() < 1e-10);
        assert!((r.discrepancy - (yq.norm_squared() + t.norm_squared())).abs() < 1e-9);
    }

    #[test]
    fn duplicate_rows_need_the_ridge() {
        let row = random_rows(1, 5, 9);
        let x = DMatrix::from_fn(4, 5, |_, k| row[(0, k)]);
        let y = DVector::from_element(4, 1.0);
        let inputs = GramInputs { x_p: x.clone(), y_p: y.clone(), x_q: x, y_q: y };
        assert!(matches!(consistency(&inputs, 0.0), Err(Error::Singular(_))));
        let r = consistency(&inputs, 1e-3).unwrap();
        assert!(r.discrepancy.is_finite());
        assert!(r.lambda_p.abs() < 1e-12);
    }

    #[test]
    fn single_sample_by_hand() {
        let ds = synth_blobs(2, 3, 5, 0.2, 4);
        let part = dirichlet_partition(&ds, 2, 1.0, 1, 1).unwrap();
        let r = consistency_from_partition(&ds, &part, &[0], 1, 3, 1e-8, None).unwrap();
        assert_eq!(r.h_p.shape(), (1, 1));
        assert!((r.h_p[(0, 0)] - 0.5).abs() < 1e-14);
        let sample = consistency_sample(&ds, &part, &[0], 1, 3).unwrap();
        let class = r.positive_class.unwrap();
        let yp = if ds.labels()[sample.p[0]] == class { 1.0 } else { -1.0 };
        let yq = if ds.labels()[sample.q[0]] == class { 1.0 } else { -1.0 };
        assert_eq!(yq, 1.0);
        let h = kernel_entry(
            &normalized_rows(&feature_matrix(&ds, &sample.p)).unwrap().row(0).iter().copied().collect::<Vec<_>>(),
            &normalized_rows(&feature_matrix(&ds, &sample.q)).unwrap().row(0).iter().copied().collect::<Vec<_>>(),
        );
        let transfer = h * yp / (0.5 + 1e-8);
        assert!((r.y_transfer[0] - transfer).abs() < 1e-12);
        assert!((r.discrepancy - (yq - transfer).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_disjoint_sampling() {
        let ds = synth_blobs(3, 4, 30, 0.3, 1);
        let part = dirichlet_partition(&ds, 5, 0.5, 2, 1).unwrap();
        let s = consistency_sample(&ds, &part, &[0, 3], 10, 8).unwrap();
        assert_eq!(s, consistency_sample(&ds, &part, &[0, 3], 10, 8).unwrap());
        assert!(s.p.iter().all(|i| !s.q.contains(i)));
        let owned: Vec<usize> = part.assignments[0].iter().chain(&part.assignments[3]).copied().collect();
        assert!(s.p.iter().all(|i| owned.contains(i)));
        let a = consistency_from_partition(&ds, &part, &[0, 3], 10, 8, 1e-6, None).unwrap();
        let b = consistency_from_partition(&ds, &part, &[0, 3], 10, 8, 1e-6, None).unwrap();
        assert_eq!(a, b);
    }
}
