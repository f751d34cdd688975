//! Generalized propensity scores via multinomial logistic regression.
//!
//! The last treatment group is the reference category, so the coefficient
//! matrix has `z - 1` rows and `p + 1` columns (intercept first).

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};

const GRAD_TOL: f64 = 1e-8;
const MAX_ITER: usize = 100;
const SEPARATION_NORM: f64 = 1e4;
/// Probabilities are clamped into this range before taking logits.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct GpsModel {
    /// `(z-1) x (p+1)` coefficients; reference category fixed at zero.
    pub coefficients: DMatrix<f64>,
    /// `n x z` fitted probabilities; rows sum to one.
    pub scores: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_max_norm: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone)]
pub struct OverlapReport {
    pub eta: f64,
    /// Per-group (min, max) fitted score.
    pub score_range: Vec<(f64, f64)>,
    /// Units with any score `>= 1 - eta` or `<= eta`. Advisory; no trimming.
    pub flagged_units: Vec<usize>,
}

/// Options for [`fit_gps_with`]; `Default` gives the plain ML fit.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// L2 penalty on non-intercept coefficients; separation fallback.
    pub ridge: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { ridge: 0.0 }
    }
}

pub fn fit_gps(ds: &Dataset) -> Result<GpsModel> {
    fit_gps_with(ds, FitOptions::default())
}

pub fn fit_gps_with(ds: &Dataset, opts: FitOptions) -> Result<GpsModel> {
    let n = ds.n();
    let z = ds.z();
    let p1 = ds.p() + 1;
    let k = (z - 1) * p1;

    // Design matrix with leading intercept column.
    let mut design = DMatrix::zeros(n, p1);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        for c in 0..ds.p() {
            design[(i, c + 1)] = ds.covariates()[(i, c)];
        }
    }

    let mut beta = DVector::zeros(k); // flattened (z-1) x p1, row-major by category
    let mut ll = log_likelihood(ds, &design, &beta, opts.ridge);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;

    while iterations < MAX_ITER {
        let probs = probabilities(&design, &beta, z);
        let (grad, hess) = score_and_information(ds, &design, &probs, opts.ridge, &beta);
        grad_norm = grad.amax();
        if grad_norm < GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let step = match hess.clone().cholesky() {
            Some(chol) => chol.solve(&grad),
            None => {
                // Ridge the information matrix just enough to invert it.
                let mut h = hess;
                for d in 0..k {
                    h[(d, d)] += 1e-8;
                }
                h.cholesky()
                    .ok_or(Error::NotConverged {
                        iterations,
                        grad_norm,
                    })?
                    .solve(&grad)
            }
        };
        // Step-halving keeps the log-likelihood non-decreasing.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &beta + scale * &step;
            let cand_ll = log_likelihood(ds, &design, &candidate, opts.ridge);
            if cand_ll >= ll - 1e-12 {
                beta = candidate;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        if beta.amax() > SEPARATION_NORM {
            return Err(Error::Separation(beta.amax()));
        }
    }

    let probs = probabilities(&design, &beta, z);
    let mut coefficients = DMatrix::zeros(z - 1, p1);
    for w in 0..z - 1 {
        for c in 0..p1 {
            coefficients[(w, c)] = beta[w * p1 + c];
        }
    }
    Ok(GpsModel {
        coefficients,
        scores: probs,
        converged,
        iterations,
        gradient_max_norm: grad_norm,
        log_likelihood: ll,
    })
}

fn probabilities(design: &DMatrix<f64>, beta: &DVector<f64>, z: usize) -> DMatrix<f64> {
    let n = design.nrows();
    let p1 = design.ncols();
    let mut probs = DMatrix::zeros(n, z);
    for i in 0..n {
        let mut eta = vec![0.0; z];
        for w in 0..z - 1 {
            let mut v = 0.0;
            for c in 0..p1 {
                v += design[(i, c)] * beta[w * p1 + c];
            }
            eta[w] = v;
        }
        let max_eta = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for e in eta.iter_mut() {
            *e = (*e - max_eta).exp();
            denom += *e;
        }
        for w in 0..z {
            probs[(i, w)] = eta[w] / denom;
        }
    }
    probs
}

fn log_likelihood(ds: &Dataset, design: &DMatrix<f64>, beta: &DVector<f64>, ridge: f64) -> f64 {
    let z = ds.z();
    let p1 = design.ncols();
    let mut ll = 0.0;
    for i in 0..ds.n() {
        let mut eta = vec![0.0; z];
        for w in 0..z - 1 {
            let mut v = 0.0;
            for c in 0..p1 {
                v += design[(i, c)] * beta[w * p1 + c];
            }
            eta[w] = v;
        }
        let max_eta = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max_eta
            + eta
                .iter()
                .map(|e| (e - max_eta).exp())
                .sum::<f64>()
                .ln();
        ll += eta[ds.group_of(i)] - lse;
    }
    if ridge > 0.0 {
        for w in 0..z - 1 {
            for c in 1..p1 {
                ll -= 0.5 * ridge * beta[w * p1 + c].powi(2);
            }
        }
    }
    ll
}

/// Gradient and negative Hessian (observed information) of the penalized
/// log-likelihood, flattened over categories.
fn score_and_information(
    ds: &Dataset,
    design: &DMatrix<f64>,
    probs: &DMatrix<f64>,
    ridge: f64,
    beta: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let z = ds.z();
    let p1 = design.ncols();
    let k = (z - 1) * p1;
    let mut grad = DVector::zeros(k);
    let mut info = DMatrix::zeros(k, k);
    for i in 0..ds.n() {
        let wi = ds.group_of(i);
        for w in 0..z - 1 {
            let resid = if wi == w { 1.0 } else { 0.0 } - probs[(i, w)];
            for c in 0..p1 {
                grad[w * p1 + c] += resid * design[(i, c)];
            }
            for w2 in 0..z - 1 {
                let weight = probs[(i, w)]
                    * (if w == w2 { 1.0 } else { 0.0 } - probs[(i, w2)]);
                if weight == 0.0 {
                    continue;
                }
                for c in 0..p1 {
                    for c2 in 0..p1 {
                        info[(w * p1 + c, w2 * p1 + c2)] +=
                            weight * design[(i, c)] * design[(i, c2)];
                    }
                }
            }
        }
    }
    if ridge > 0.0 {
        for w in 0..z - 1 {
            for c in 1..p1 {
                grad[w * p1 + c] -= ridge * beta[w * p1 + c];
                info[(w * p1 + c, w * p1 + c)] += ridge;
            }
        }
    }
    (grad, info)
}

/// logit(p) entrywise, with probabilities clamped to `[1e-12, 1 - 1e-12]`.
pub fn logit_scores(model: &GpsModel) -> DMatrix<f64> {
    model.scores.map(|p| {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        (p / (1.0 - p)).ln()
    })
}

pub fn overlap_report(model: &GpsModel, eta: f64) -> Result<OverlapReport> {
    if !(eta > 0.0 && eta < 0.5) {
        return Err(Error::InvalidEta(eta));
    }
    let z = model.scores.ncols();
    let mut score_range = Vec::with_capacity(z);
    for w in 0..z {
        let col = model.scores.column(w);
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        score_range.push((min, max));
    }
    let flagged_units = (0..model.scores.nrows())
        .filter(|&i| {
            (0..z).any(|w| {
                let s = model.scores[(i, w)];
                s >= 1.0 - eta || s <= eta
            })
        })
        .collect();
    Ok(OverlapReport {
        eta,
        score_range,
        flagged_units,
    })
}
