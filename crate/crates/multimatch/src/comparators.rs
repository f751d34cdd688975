//! Inverse probability weighting and doubly robust benchmark estimators.
//!
//! Both target the reference-`t` pairwise effect one pair at a time, with
//! plug-in standard errors that treat the weights as fixed.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::GroupRegression;
use crate::gps::{GpsModel, PROB_CLAMP};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComparatorMethod {
    Ipw,
    Dr,
}

impl ComparatorMethod {
    pub fn name(self) -> &'static str {
        match self {
            ComparatorMethod::Ipw => "IPW",
            ComparatorMethod::Dr => "DR",
        }
    }
}

/// Point estimate and plug-in SE for one pair, plus weight diagnostics.
#[derive(Debug, Clone)]
pub struct ComparatorEstimate {
    pub method: ComparatorMethod,
    pub reference: usize,
    pub pair: (usize, usize),
    pub estimate: f64,
    pub se: f64,
    pub max_weight: f64,
    /// Kish effective sample size of the weights, per pair side, minimized.
    pub effective_sample_size: f64,
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Ratio weights `r(t, X_i) / r(w, X_i)` for group-`w` units (unit weight
/// when `w == t`), optionally capped.
fn weights(ds: &Dataset, gps: &GpsModel, t: usize, w: usize, cap: Option<f64>) -> Vec<f64> {
    ds.group(w)
        .iter()
        .map(|&i| {
            let u = if w == t {
                1.0
            } else {
                clamp(gps.scores[(i, t)]) / clamp(gps.scores[(i, w)])
            };
            match cap {
                Some(c) => u.min(c),
                None => u,
            }
        })
        .collect()
}

struct WeightedMean {
    mean: f64,
    var: f64,
    max_weight: f64,
    ess: f64,
}

/// Per-group adjusted means and variances, enough to assemble any pairwise
/// contrast and its covariance.
#[derive(Debug, Clone)]
pub struct GroupProfile {
    pub method: ComparatorMethod,
    pub reference: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub max_weight: f64,
    pub min_ess: f64,
}

pub fn ipw_profile(
    ds: &Dataset,
    gps: &GpsModel,
    t: usize,
    cap: Option<f64>,
) -> Result<GroupProfile> {
    let mut mean = Vec::with_capacity(ds.z());
    let mut variance = Vec::with_capacity(ds.z());
    let mut max_weight: f64 = 0.0;
    let mut min_ess = f64::INFINITY;
    for w in 0..ds.z() {
        let u = weights(ds, gps, t, w, cap);
        let y: Vec<f64> = ds.group(w).iter().map(|&i| ds.outcome(i)).collect();
        let wm = weighted_mean(&y, &u)?;
        mean.push(wm.mean);
        variance.push(wm.var);
        max_weight = max_weight.max(wm.max_weight);
        min_ess = min_ess.min(wm.ess);
    }
    Ok(GroupProfile {
        method: ComparatorMethod::Ipw,
        reference: t,
        mean,
        variance,
        max_weight,
        min_ess,
    })
}

pub fn dr_profile(
    ds: &Dataset,
    gps: &GpsModel,
    regs: &GroupRegression,
    t: usize,
    cap: Option<f64>,
) -> Result<GroupProfile> {
    let n_t = ds.group_size(t) as f64;
    let mut mean = Vec::with_capacity(ds.z());
    let mut variance = Vec::with_capacity(ds.z());
    let mut max_weight: f64 = 0.0;
    let mut min_ess = f64::INFINITY;
    for w in 0..ds.z() {
        let mu_bar: f64 = ds
            .group(t)
            .iter()
            .map(|&i| regs.predict_unit(ds, w, i))
            .sum::<f64>()
            / n_t;
        let u = weights(ds, gps, t, w, cap);
        let resid: Vec<f64> = ds
            .group(w)
            .iter()
            .map(|&i| ds.outcome(i) - regs.predict_unit(ds, w, i))
            .collect();
        let wm = weighted_mean(&resid, &u)?;
        let mu_var = if ds.group_size(t) > 1 {
            ds.group(t)
                .iter()
                .map(|&i| (regs.predict_unit(ds, w, i) - mu_bar).powi(2))
                .sum::<f64>()
                / (n_t * (n_t - 1.0))
        } else {
            0.0
        };
        mean.push(mu_bar + wm.mean);
        variance.push(wm.var + mu_var);
        max_weight = max_weight.max(wm.max_weight);
        min_ess = min_ess.min(wm.ess);
    }
    Ok(GroupProfile {
        method: ComparatorMethod::Dr,
        reference: t,
        mean,
        variance,
        max_weight,
        min_ess,
    })
}

/// Weighted mean of `values` with the linearized variance
/// `sum u_i^2 (v_i - mean)^2 / (sum u_i)^2`.
fn weighted_mean(values: &[f64], u: &[f64]) -> Result<WeightedMean> {
    let total: f64 = u.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("zero weight sum".to_string()));
    }
    let mean = values.iter().zip(u).map(|(v, w)| v * w).sum::<f64>() / total;
    let var = values
        .iter()
        .zip(u)
        .map(|(v, w)| w * w * (v - mean).powi(2))
        .sum::<f64>()
        / (total * total);
    let sum_sq: f64 = u.iter().map(|w| w * w).sum();
    Ok(WeightedMean {
        mean,
        var,
        max_weight: u.iter().cloned().fold(0.0, f64::max),
        ess: total * total / sum_sq,
    })
}

pub fn ipw_att(
    ds: &Dataset,
    gps: &GpsModel,
    t: usize,
    pair: (usize, usize),
    cap: Option<f64>,
) -> Result<ComparatorEstimate> {
    let (j, k) = pair;
    let side = |w: usize| -> Result<WeightedMean> {
        let u = weights(ds, gps, t, w, cap);
        let y: Vec<f64> = ds.group(w).iter().map(|&i| ds.outcome(i)).collect();
        weighted_mean(&y, &u)
    };
    let mj = side(j)?;
    let mk = side(k)?;
    Ok(ComparatorEstimate {
        method: ComparatorMethod::Ipw,
        reference: t,
        pair,
        estimate: mj.mean - mk.mean,
        se: (mj.var + mk.var).sqrt(),
        max_weight: mj.max_weight.max(mk.max_weight),
        effective_sample_size: mj.ess.min(mk.ess),
    })
}

pub fn dr_att(
    ds: &Dataset,
    gps: &GpsModel,
    regs: &GroupRegression,
    t: usize,
    pair: (usize, usize),
    cap: Option<f64>,
) -> Result<ComparatorEstimate> {
    let (j, k) = pair;
    let n_t = ds.group_size(t) as f64;
    let side = |w: usize| -> Result<(f64, f64, f64, f64)> {
        // Regression prediction averaged over the reference group, augmented
        // by the weighted residual of group-w units.
        let mu_bar: f64 = ds
            .group(t)
            .iter()
            .map(|&i| regs.predict_unit(ds, w, i))
            .sum::<f64>()
            / n_t;
        let u = weights(ds, gps, t, w, cap);
        let resid: Vec<f64> = ds
            .group(w)
            .iter()
            .map(|&i| ds.outcome(i) - regs.predict_unit(ds, w, i))
            .collect();
        let wm = weighted_mean(&resid, &u)?;
        // Variance of the reference-group regression average.
        let mu_var = if ds.group_size(t) > 1 {
            ds.group(t)
                .iter()
                .map(|&i| (regs.predict_unit(ds, w, i) - mu_bar).powi(2))
                .sum::<f64>()
                / (n_t * (n_t - 1.0))
        } else {
            0.0
        };
        Ok((mu_bar + wm.mean, wm.var + mu_var, wm.max_weight, wm.ess))
    };
    let (ej, vj, wj, essj) = side(j)?;
    let (ek, vk, wk, essk) = side(k)?;
    Ok(ComparatorEstimate {
        method: ComparatorMethod::Dr,
        reference: t,
        pair,
        estimate: ej - ek,
        se: (vj + vk).sqrt(),
        max_weight: wj.max(wk),
        effective_sample_size: essj.min(essk),
    })
}
