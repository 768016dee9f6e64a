use std::collections::BTreeMap;

use super::StrategyState;
use crate::error::{Error, Result};
use crate::nn::ParamVector;

/// Weighted mean of client models, weights `N_i / Σ N_i`.
///
/// Evaluated as `x_0 + Σ_i p_i (x_i − x_0)` so that identical contributions
/// come back unchanged; each coordinate is kept inside the contributors'
/// range.
pub fn aggregate(contribs: &[(&[f64], f64)]) -> Result<ParamVector> {
    let (first, _) = contribs
        .first()
        .ok_or_else(|| Error::InvalidConfig("nothing to aggregate".into()))?;
    let len = first.len();
    if contribs.iter().any(|(p, _)| p.len() != len) {
        return Err(Error::DimensionMismatch("contributions differ in length".into()));
    }
    if contribs.iter().any(|&(_, w)| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidConfig("aggregation weights must be finite and non-negative".into()));
    }
    let total: f64 = contribs.iter().map(|&(_, w)| w).sum();
    if total <= 0.0 {
        return Err(Error::InvalidConfig("aggregation weights sum to zero".into()));
    }
    let out = (0..len)
        .map(|k| {
            let anchor = first[k];
            let mut lo = anchor;
            let mut hi = anchor;
            let mut shift = 0.0;
            for &(p, w) in contribs {
                lo = lo.min(p[k]);
                hi = hi.max(p[k]);
                shift += (w / total) * (p[k] - anchor);
            }
            (anchor + shift).clamp(lo, hi)
        })
        .collect::<Vec<_>>();
    Ok(out.into())
}

/// Server control-variate update: `c ← c + (1/m_total) Σ_{i∈P} (c_i^new − c_i^old)`,
/// i.e. the participation fraction times the mean variate change.
///
/// `state.c_client` must already hold the refreshed variates of every
/// participant; `old` holds their values before the round (missing = zero).
pub fn scaffold_server_update(
    state: &mut StrategyState,
    participating: &[usize],
    old: &BTreeMap<usize, ParamVector>,
    m_total: usize,
) {
    if participating.is_empty() || m_total == 0 {
        return;
    }
    let len = state.c_global.len();
    let mut delta = vec![0.0; len];
    for device in participating {
        let new = state.client_variate(*device);
        let zero = ParamVector::zeros(len);
        let prev = old.get(device).unwrap_or(&zero);
        for ((d, n), o) in delta.iter_mut().zip(new.iter()).zip(prev.iter()) {
            *d += n - o;
        }
    }
    for (c, d) in state.c_global.iter_mut().zip(delta) {
        *c += d / m_total as f64;
    }
}
