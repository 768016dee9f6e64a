//! Two-dimensional loss slices through a parameter vector.
//!
//! `grid(a, b) = loss(w + a·d₁ + b·d₂)` for two seeded Gaussian directions.
//! With layerwise normalization each direction is rescaled block by block so
//! that `‖d_block‖ = ‖w_block‖`, which removes the scale ambiguity between
//! layers.

use std::io::Write;
use std::ops::Range;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Batch, ModelSpec};
use crate::rng;
use crate::task::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    None,
    #[default]
    Layerwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceSpec {
    /// Points per axis; odd so that the origin is on the grid.
    pub resolution: usize,
    /// The grid spans `[-range, range]²`.
    pub range: f64,
    pub normalization: Normalization,
    pub seed: u64,
}

impl Default for SliceSpec {
    fn default() -> Self {
        SliceSpec { resolution: 41, range: 1.0, normalization: Normalization::Layerwise, seed: 0 }
    }
}

impl SliceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 3 || self.resolution.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "slice resolution must be odd and at least 3, got {}",
                self.resolution
            )));
        }
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(Error::InvalidConfig("slice range must be positive".into()));
        }
        Ok(())
    }

    /// Coordinate of grid index `i` along either axis.
    pub fn coord(&self, i: usize) -> f64 {
        let half = (self.resolution - 1) as f64;
        self.range * (2.0 * i as f64 - half) / half
    }
}

/// Loss values over the slice, row-major with the first direction along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub spec: SliceSpec,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.spec.resolution + j]
    }

    pub fn center(&self) -> f64 {
        let c = self.spec.resolution / 2;
        self.at(c, c)
    }

    /// `(a, b, loss)` triples in row-major order.
    pub fn points(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let res = self.spec.resolution;
        (0..res * res).map(move |k| (self.spec.coord(k / res), self.spec.coord(k % res), self.values[k]))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "a,b,loss")?;
        for (a, b, v) in self.points() {
            writeln!(out, "{a:.16e},{b:.16e},{v:.16e}")?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// Two directions drawn from `N(0, I)`, optionally norm-matched per block.
pub fn directions(params: &[f64], blocks: &[Range<usize>], spec: &SliceSpec) -> Result<[Vec<f64>; 2]> {
    let n = params.len();
    if let Some(b) = blocks.iter().find(|b| b.end > n) {
        return Err(Error::DimensionMismatch(format!("block {b:?} exceeds {n} parameters")));
    }
    let draw = |k: u64| {
        let mut r = rng::stream(spec.seed, "direction", &[k]);
        let mut d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        if spec.normalization == Normalization::Layerwise {
            for block in blocks {
                let target = params[block.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
                let have = d[block.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
                let scale = if have > 0.0 { target / have } else { 0.0 };
                d[block.clone()].iter_mut().for_each(|x| *x *= scale);
            }
        }
        d
    };
    Ok([draw(0), draw(1)])
}

/// Evaluate `loss` on the slice; non-finite or failed points become `+∞`.
pub fn slice<F>(loss: F, params: &[f64], blocks: &[Range<usize>], spec: &SliceSpec) -> Result<Grid>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    spec.validate()?;
    let [d1, d2] = directions(params, blocks, spec)?;
    let res = spec.resolution;
    let values = (0..res * res)
        .into_par_iter()
        .map(|k| {
            let (a, b) = (spec.coord(k / res), spec.coord(k % res));
            let point: Vec<f64> = params
                .iter()
                .zip(d1.iter().zip(&d2))
                .map(|(w, (x, y))| w + a * x + b * y)
                .collect();
            match loss(&point) {
                Ok(v) if v.is_finite() => v,
                _ => f64::INFINITY,
            }
        })
        .collect();
    Ok(Grid { spec: spec.clone(), values })
}

/// Slice of an MLP's cross-entropy on `probe`.
pub fn slice_mlp(model: &ModelSpec, params: &[f64], probe: &Batch, spec: &SliceSpec) -> Result<Grid> {
    if params.len() != model.param_count() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} parameters, got {}",
            model.param_count(),
            params.len()
        )));
    }
    slice(|w| nn::loss(model, w, probe), params, &model.layer_blocks(), spec)
}

/// Slice of a task's probe loss.
pub fn slice_task<T: Task + ?Sized>(task: &T, params: &[f64], spec: &SliceSpec) -> Result<Grid> {
    slice(|w| task.probe_loss(w), params, &task.param_blocks(), spec)
}

/// Mean rise above the center over the outer ring of the grid.
pub fn sharpness(grid: &Grid) -> f64 {
    let res = grid.resolution();
    let center = grid.center();
    let last = res - 1;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..res {
        for j in 0..res {
            if i == 0 || j == 0 || i == last || j == last {
                sum += grid.at(i, j) - center;
                count += 1;
            }
        }
    }
    sum / count as f64
}
