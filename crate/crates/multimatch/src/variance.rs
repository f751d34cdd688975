//! Conditional outcome variances, marginal variances of the imputed group
//! means, and assembly of the pairwise-effect covariance matrix.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::data::lexicographic_pairs;
use crate::estimators::{GroupRegression, ImputedOutcomes};
use crate::matching::MatchResult;

/// Per-unit conditional outcome variance estimates.
#[derive(Debug, Clone)]
pub struct ConditionalVariances {
    pub sigma2: Vec<f64>,
    pub method: SigmaMethod,
    pub j_within: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMethod {
    RawMatch,
    ResidualCorrected,
}

impl SigmaMethod {
    pub fn name(self) -> &'static str {
        match self {
            SigmaMethod::RawMatch => "raw_match",
            SigmaMethod::ResidualCorrected => "residual_corrected",
        }
    }
}

/// Marginal variances of the imputed group means and the assembled pairwise
/// covariance.
#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    pub var_ybar: Vec<f64>,
    pub cov_tau: DMatrix<f64>,
}

fn sigma2_from_values(within: &[Vec<usize>], pick: impl Fn(usize) -> f64) -> Vec<f64> {
    within
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let j = set.len() as f64;
            let mean: f64 = set.iter().map(|&l| pick(l)).sum::<f64>() / j;
            j / (j + 1.0) * (pick(i) - mean).powi(2)
        })
        .collect()
}

/// Conditional variance from within-group matched outcomes.
pub fn sigma2_raw(ds: &Dataset, matches: &MatchResult) -> Result<ConditionalVariances> {
    let within = matches.within.as_ref().ok_or(Error::MissingWithinMatches)?;
    let sigma2 = sigma2_from_values(within, |i| ds.outcome(i));
    Ok(ConditionalVariances {
        sigma2,
        method: SigmaMethod::RawMatch,
        j_within: matches.j_within,
    })
}

/// Conditional variance from within-group matched regression residuals.
pub fn sigma2_residual(
    ds: &Dataset,
    matches: &MatchResult,
    regs: &GroupRegression,
) -> Result<ConditionalVariances> {
    let within = matches.within.as_ref().ok_or(Error::MissingWithinMatches)?;
    let residuals: Vec<f64> = (0..ds.n())
        .map(|i| ds.outcome(i) - regs.predict_unit(ds, ds.group_of(i), i))
        .collect();
    let sigma2 = sigma2_from_values(within, |i| residuals[i]);
    Ok(ConditionalVariances {
        sigma2,
        method: SigmaMethod::ResidualCorrected,
        j_within: matches.j_within,
    })
}

/// Estimated marginal variance of the imputed group mean, one entry per
/// treatment group, for reference group `t`.
pub fn var_ybar(
    ds: &Dataset,
    imputed: &ImputedOutcomes,
    matches: &MatchResult,
    sig: &ConditionalVariances,
    t: usize,
) -> Result<Vec<f64>> {
    if t >= ds.z() {
        return Err(Error::InvalidLabel(t));
    }
    if sig.sigma2.len() != ds.n() {
        return Err(Error::DimensionMismatch {
            expected: ds.n(),
            got: sig.sigma2.len(),
        });
    }
    let n_t = ds.group_size(t) as f64;
    let m = matches.m.max(1) as f64;
    let mut out = vec![0.0; ds.z()];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut ytilde = 0.0;
        for &i in ds.group(t) {
            let v = imputed.yhat[(i, j)];
            if v.is_nan() {
                return Err(Error::MissingMatches { unit: i, group: j });
            }
            ytilde += v;
        }
        ytilde /= n_t;
        let mut first = 0.0;
        for &i in ds.group(t) {
            first += (imputed.yhat[(i, j)] - ytilde).powi(2);
        }
        let mut second = 0.0;
        for &i in ds.group(j) {
            let psi = matches.psi[i][t] as f64;
            second += psi * (psi - 1.0) / (m * m) * sig.sigma2[i];
        }
        *slot = (first + second) / (n_t * n_t);
    }
    Ok(out)
}

/// Assembles `A diag(var_ybar) A^T` for the lexicographic pair order.
pub fn assemble_covariance(var_ybar: &[f64]) -> Result<CovarianceMatrix> {
    let z = var_ybar.len();
    if let Some(&bad) = var_ybar.iter().find(|&&v| v < 0.0) {
        return Err(Error::Config(format!(
            "negative marginal variance entry {bad}"
        )));
    }
    let pairs = lexicographic_pairs(z);
    let p = pairs.len();
    let mut a = DMatrix::zeros(p, z);
    for (q, &(j, k)) in pairs.iter().enumerate() {
        a[(q, j)] = 1.0;
        a[(q, k)] = -1.0;
    }
    let diag = DMatrix::from_diagonal(&DVector::from_column_slice(var_ybar));
    let cov_tau = &a * diag * a.transpose();
    Ok(CovarianceMatrix {
        var_ybar: var_ybar.to_vec(),
        cov_tau,
    })
}

/// Randomization-based comparator covariance: sample covariance of the
/// per-unit imputed differences over the reference group, divided by `n_t`.
/// Known to understate the truth when matches are reused heavily.
pub fn randomization_covariance(
    ds: &Dataset,
    imputed: &ImputedOutcomes,
    t: usize,
) -> Result<DMatrix<f64>> {
    let n_t = ds.group_size(t);
    if n_t < 2 {
        return Err(Error::ReferenceTooSmall(n_t));
    }
    let pairs = lexicographic_pairs(ds.z());
    let p = pairs.len();
    // D[q][r]: imputed difference for pair q at the r-th reference unit.
    let mut d = vec![vec![0.0; n_t]; p];
    for (r, &i) in ds.group(t).iter().enumerate() {
        for (q, &(j, k)) in pairs.iter().enumerate() {
            let vj = imputed.yhat[(i, j)];
            let vk = imputed.yhat[(i, k)];
            if vj.is_nan() || vk.is_nan() {
                return Err(Error::MissingMatches { unit: i, group: j });
            }
            d[q][r] = vj - vk;
        }
    }
    let means: Vec<f64> = d.iter().map(|v| v.iter().sum::<f64>() / n_t as f64).collect();
    let mut cov = DMatrix::zeros(p, p);
    for q in 0..p {
        for q2 in q..p {
            let s: f64 = (0..n_t)
                .map(|r| (d[q][r] - means[q]) * (d[q2][r] - means[q2]))
                .sum::<f64>()
                / (n_t as f64 - 1.0);
            cov[(q, q2)] = s / n_t as f64;
            cov[(q2, q)] = cov[(q, q2)];
        }
    }
    Ok(cov)
}
