//! Point estimation: matched imputation of potential outcomes, the basic and
//! bias-corrected pairwise effect estimates, and sample-share aggregation of
//! per-reference estimates into the overall effect.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, EstimandSpec, Reference};
use crate::error::{Error, Result};
use crate::matching::MatchResult;

/// Imputed potential outcomes; entry `(i, w)` is `NaN` when outside the
/// requested scope.
#[derive(Debug, Clone)]
pub struct ImputedOutcomes {
    pub yhat: DMatrix<f64>,
    pub variant: Variant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Basic,
    BiasCorrected,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::BiasCorrected => "bias_corrected",
        }
    }
}

/// A pairwise effect estimate for one reference group (or the overall ATE).
#[derive(Debug, Clone)]
pub struct EffectEstimate {
    pub reference: Reference,
    /// `(j, k)` pairs with `j < k`, lexicographic.
    pub pair_order: Vec<(usize, usize)>,
    pub tau_hat: DVector<f64>,
    /// Absent for the overall ATE and for point-only estimates.
    pub covariance: Option<DMatrix<f64>>,
    /// Group means of the imputed outcomes over the reference group.
    pub ybar: Vec<f64>,
    pub variant: Variant,
    pub se_method: Option<String>,
    pub m: usize,
    pub j_within: usize,
    /// Set when the reference group is degenerate (a single unit).
    pub covariance_unreliable: bool,
}

/// Per-group outcome regressions used for bias correction and residual
/// variance estimation.
#[derive(Debug, Clone)]
pub struct GroupRegression {
    /// Per-group coefficients on the expanded design.
    pub beta: Vec<DVector<f64>>,
    pub interactions: bool,
    p: usize,
}

impl GroupRegression {
    /// Expands a covariate row into the regression design.
    fn design_row(p: usize, interactions: bool, x: &[f64]) -> Vec<f64> {
        let mut row = Vec::with_capacity(design_len(p, interactions));
        row.push(1.0);
        row.extend_from_slice(x);
        if interactions {
            for a in 0..p {
                for b in (a + 1)..p {
                    row.push(x[a] * x[b]);
                }
            }
        }
        row
    }

    /// Predicted mean outcome for group `w` at covariates `x`.
    pub fn predict(&self, w: usize, x: &[f64]) -> f64 {
        let row = Self::design_row(self.p, self.interactions, x);
        row.iter().zip(self.beta[w].iter()).map(|(a, b)| a * b).sum()
    }

    pub fn predict_unit(&self, ds: &Dataset, w: usize, i: usize) -> f64 {
        let x: Vec<f64> = ds.covariates().row(i).iter().copied().collect();
        self.predict(w, &x)
    }
}

fn design_len(p: usize, interactions: bool) -> usize {
    1 + p + if interactions { p * (p - 1) / 2 } else { 0 }
}

/// Ordinary least squares per treatment group, intercept plus main effects
/// (plus pairwise interactions behind the flag).
pub fn fit_group_regressions(ds: &Dataset, interactions: bool) -> Result<GroupRegression> {
    let p = ds.p();
    let cols = design_len(p, interactions);
    let mut beta = Vec::with_capacity(ds.z());
    for w in 0..ds.z() {
        let members = ds.group(w);
        if members.len() <= cols {
            return Err(Error::GroupTooSmall {
                label: ds.label(w).to_string(),
                size: members.len(),
                required: cols + 1,
            });
        }
        let mut design = DMatrix::zeros(members.len(), cols);
        let mut y = DVector::zeros(members.len());
        for (r, &i) in members.iter().enumerate() {
            let x: Vec<f64> = ds.covariates().row(i).iter().copied().collect();
            for (c, v) in GroupRegression::design_row(p, interactions, &x)
                .into_iter()
                .enumerate()
            {
                design[(r, c)] = v;
            }
            y[r] = ds.outcome(i);
        }
        let svd = design.svd(true, true);
        let scale = svd.singular_values.max();
        let tol = scale * 1e-10;
        let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
        if rank < cols {
            return Err(Error::RankDeficient { rank, cols });
        }
        let b = svd
            .solve(&y, tol)
            .map_err(|_| Error::RankDeficient { rank, cols })?;
        beta.push(b);
    }
    Ok(GroupRegression {
        beta,
        interactions,
        p,
    })
}

/// Imputes missing potential outcomes as the mean of matched outcomes.
pub fn impute_basic(ds: &Dataset, matches: &MatchResult) -> Result<ImputedOutcomes> {
    let mut yhat = DMatrix::from_element(ds.n(), ds.z(), f64::NAN);
    for i in 0..ds.n() {
        yhat[(i, ds.group_of(i))] = ds.outcome(i);
        for w in 0..ds.z() {
            if let Some(set) = &matches.cross[i][w] {
                let mean = set.iter().map(|&j| ds.outcome(j)).sum::<f64>() / set.len() as f64;
                yhat[(i, w)] = mean;
            }
        }
    }
    Ok(ImputedOutcomes {
        yhat,
        variant: Variant::Basic,
    })
}

/// Regression-adjusted imputation: each matched outcome is shifted by the
/// predicted difference between the imputed unit and its match.
pub fn impute_bias_corrected(
    ds: &Dataset,
    matches: &MatchResult,
    regs: &GroupRegression,
) -> Result<ImputedOutcomes> {
    let mut yhat = DMatrix::from_element(ds.n(), ds.z(), f64::NAN);
    for i in 0..ds.n() {
        yhat[(i, ds.group_of(i))] = ds.outcome(i);
        for w in 0..ds.z() {
            if let Some(set) = &matches.cross[i][w] {
                let mu_i = regs.predict_unit(ds, w, i);
                let mean = set
                    .iter()
                    .map(|&j| ds.outcome(j) + mu_i - regs.predict_unit(ds, w, j))
                    .sum::<f64>()
                    / set.len() as f64;
                yhat[(i, w)] = mean;
            }
        }
    }
    Ok(ImputedOutcomes {
        yhat,
        variant: Variant::BiasCorrected,
    })
}

/// Estimated conditional bias terms `B̂_w^t` for each group `w`.
pub fn bias_terms(
    ds: &Dataset,
    matches: &MatchResult,
    regs: &GroupRegression,
    t: usize,
) -> Result<Vec<f64>> {
    let n_t = ds.group_size(t) as f64;
    let mut out = vec![0.0; ds.z()];
    for (w, slot) in out.iter_mut().enumerate() {
        if w == t {
            continue;
        }
        let mut acc = 0.0;
        for &i in ds.group(t) {
            let set = matches.matches(i, w)?;
            let mu_i = regs.predict_unit(ds, w, i);
            let sum: f64 = set
                .iter()
                .map(|&j| mu_i - regs.predict_unit(ds, w, j))
                .sum();
            acc += sum / set.len() as f64;
        }
        *slot = acc / n_t;
    }
    Ok(out)
}

/// Point estimate of the pairwise effects for reference group `t`.
pub fn estimate_att(
    ds: &Dataset,
    imputed: &ImputedOutcomes,
    matches: &MatchResult,
    t: usize,
) -> Result<EffectEstimate> {
    if t >= ds.z() {
        return Err(Error::InvalidLabel(t));
    }
    let z = ds.z();
    let n_t = ds.group_size(t) as f64;
    let mut ybar = vec![0.0; z];
    for &i in ds.group(t) {
        for w in 0..z {
            let v = imputed.yhat[(i, w)];
            if v.is_nan() {
                return Err(Error::MissingMatches { unit: i, group: w });
            }
            ybar[w] += v;
        }
    }
    for v in ybar.iter_mut() {
        *v /= n_t;
    }
    let spec = EstimandSpec::all_pairs(Reference::Treated(t), z);
    let tau_hat = DVector::from_iterator(
        spec.pairs.len(),
        spec.pairs.iter().map(|&(j, k)| ybar[j] - ybar[k]),
    );
    Ok(EffectEstimate {
        reference: Reference::Treated(t),
        pair_order: spec.pairs,
        tau_hat,
        covariance: None,
        ybar,
        variant: imputed.variant,
        se_method: None,
        m: matches.m,
        j_within: matches.j_within,
        covariance_unreliable: ds.group_size(t) < 2,
    })
}

/// The psi-weighted closed form of the same estimator; used as a cross-check
/// of [`estimate_att`] for the basic variant.
pub fn estimate_att_psi_form(
    ds: &Dataset,
    matches: &MatchResult,
    t: usize,
) -> Result<DVector<f64>> {
    let z = ds.z();
    let n_t = ds.group_size(t) as f64;
    let m = matches.m as f64;
    let spec = EstimandSpec::all_pairs(Reference::Treated(t), z);
    let mut tau = DVector::zeros(spec.pairs.len());
    for (q, &(j, k)) in spec.pairs.iter().enumerate() {
        let mut acc = 0.0;
        for i in 0..ds.n() {
            let gi = ds.group_of(i);
            let t_ij = (gi == j) as i32 as f64;
            let t_ik = (gi == k) as i32 as f64;
            if t_ij == 0.0 && t_ik == 0.0 {
                continue;
            }
            let t_it = (gi == t) as i32 as f64;
            let weight = t_it + matches.psi[i][t] as f64 / m;
            acc += (t_ij - t_ik) * weight * ds.outcome(i);
        }
        tau[q] = acc / n_t;
    }
    Ok(tau)
}

/// Aggregates per-reference estimates into the overall effect, weighting by
/// sample shares. Point estimate only.
pub fn estimate_ate(ds: &Dataset, per_reference: &[EffectEstimate]) -> Result<EffectEstimate> {
    let z = ds.z();
    let n = ds.n() as f64;
    let mut by_t: Vec<Option<&EffectEstimate>> = vec![None; z];
    for est in per_reference {
        if let Reference::Treated(t) = est.reference {
            by_t[t] = Some(est);
        }
    }
    let first = by_t[0].ok_or(Error::MissingReference(0))?;
    let pair_order = first.pair_order.clone();
    let mut tau_hat = DVector::zeros(pair_order.len());
    for t in 0..z {
        let est = by_t[t].ok_or(Error::MissingReference(t))?;
        if est.pair_order != pair_order {
            return Err(Error::DimensionMismatch {
                expected: pair_order.len(),
                got: est.pair_order.len(),
            });
        }
        tau_hat += &est.tau_hat * (ds.group_size(t) as f64 / n);
    }
    Ok(EffectEstimate {
        reference: Reference::All,
        pair_order,
        tau_hat,
        covariance: None,
        ybar: vec![f64::NAN; z],
        variant: first.variant,
        se_method: None,
        m: first.m,
        j_within: first.j_within,
        covariance_unreliable: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RawRow;
    use crate::matching::{distance_metric, knn_match, DistanceKind};
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn dataset(p: usize, rows: Vec<(Vec<f64>, usize, f64)>) -> Dataset {
        let names = (0..p).map(|c| format!("x{c}")).collect();
        let raw: Vec<RawRow> = rows
            .into_iter()
            .map(|(covariates, t, outcome)| RawRow {
                covariates,
                treatment: format!("g{t}"),
                outcome,
            })
            .collect();
        Dataset::validate(names, &raw).unwrap()
    }

    fn random_dataset(seed: u64, n: usize, z: usize, p: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|i| {
                let x: Vec<f64> = (0..p).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
                let t = if i < 2 * z { i % z } else { rng.gen_range(0..z) };
                let y: f64 = 1.0 + x.iter().sum::<f64>() + rng.gen::<f64>();
                (x, t, y)
            })
            .collect();
        dataset(p, rows)
    }

    fn matched(ds: &Dataset, t: usize, m: usize) -> MatchResult {
        let metric = distance_metric(ds, None, DistanceKind::EuclidCovariates).unwrap();
        let scope = EstimandSpec::all_pairs(Reference::Treated(t), ds.z());
        knn_match(ds, &metric, m, &scope).unwrap()
    }

    #[test]
    fn basic_imputation_is_match_mean() {
        let ds = dataset(
            1,
            vec![
                (vec![0.0], 0, 10.0),
                (vec![0.1], 1, 2.0),
                (vec![0.2], 1, 4.0),
                (vec![5.0], 0, 20.0),
                (vec![5.1], 1, 30.0),
                (vec![9.0], 2, 7.0),
                (vec![9.1], 2, 9.0),
            ],
        );
        let matches = matched(&ds, 0, 2);
        let imputed = impute_basic(&ds, &matches).unwrap();
        // Unit 0 matches group-1 units {1, 2} -> mean 3.
        assert_abs_diff_eq!(imputed.yhat[(0, 1)], 3.0, epsilon = 1e-12);
        // Observed entries are untouched.
        assert_abs_diff_eq!(imputed.yhat[(0, 0)], 10.0, epsilon = 1e-15);
    }

    #[test]
    fn att_equals_psi_closed_form() {
        for seed in [1u64, 2, 3] {
            let ds = random_dataset(seed, 30, 3, 2);
            for t in 0..3 {
                let matches = matched(&ds, t, 2);
                let imputed = impute_basic(&ds, &matches).unwrap();
                let est = estimate_att(&ds, &imputed, &matches, t).unwrap();
                let psi_form = estimate_att_psi_form(&ds, &matches, t).unwrap();
                for q in 0..est.tau_hat.len() {
                    assert_abs_diff_eq!(est.tau_hat[q], psi_form[q], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn transitivity_holds_exactly() {
        let ds = random_dataset(4, 36, 3, 2);
        let matches = matched(&ds, 0, 1);
        let imputed = impute_basic(&ds, &matches).unwrap();
        let est = estimate_att(&ds, &imputed, &matches, 0).unwrap();
        // pairs: (0,1), (0,2), (1,2)
        assert_eq!(est.tau_hat[0] + est.tau_hat[2], est.tau_hat[1]);
    }

    #[test]
    fn shift_and_scale_equivariance() {
        let ds = random_dataset(5, 30, 3, 2);
        let matches = matched(&ds, 0, 1);
        let imputed = impute_basic(&ds, &matches).unwrap();
        let est = estimate_att(&ds, &imputed, &matches, 0).unwrap();

        let treatments: Vec<usize> = (0..ds.n()).map(|i| ds.group_of(i)).collect();
        let shifted: Vec<f64> = ds.outcomes().iter().map(|y| y * 3.0 + 7.0).collect();
        let ds2 = Dataset::from_parts(ds.covariates().clone(), &treatments, &shifted).unwrap();
        let matches2 = matched(&ds2, 0, 1);
        let imputed2 = impute_basic(&ds2, &matches2).unwrap();
        let est2 = estimate_att(&ds2, &imputed2, &matches2, 0).unwrap();
        for q in 0..est.tau_hat.len() {
            assert_abs_diff_eq!(est2.tau_hat[q], 3.0 * est.tau_hat[q], epsilon = 1e-10);
        }
    }

    #[test]
    fn group_regression_recovers_noiseless_line() {
        let rows: Vec<(Vec<f64>, usize, f64)> = (0..20)
            .map(|i| {
                let x = i as f64 * 0.3;
                (vec![x], i % 2, 1.0 + 2.0 * x)
            })
            .collect();
        let ds = dataset(1, rows);
        let regs = fit_group_regressions(&ds, false).unwrap();
        for w in 0..2 {
            assert_abs_diff_eq!(regs.beta[w][0], 1.0, epsilon = 1e-10);
            assert_abs_diff_eq!(regs.beta[w][1], 2.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn constant_outcome_gives_zero_slopes() {
        let rows: Vec<(Vec<f64>, usize, f64)> = (0..16)
            .map(|i| (vec![i as f64, (i * i % 7) as f64], i % 2, 5.0))
            .collect();
        let ds = dataset(2, rows);
        let regs = fit_group_regressions(&ds, false).unwrap();
        for w in 0..2 {
            assert_abs_diff_eq!(regs.beta[w][0], 5.0, epsilon = 1e-8);
            assert_abs_diff_eq!(regs.beta[w][1], 0.0, epsilon = 1e-8);
            assert_abs_diff_eq!(regs.beta[w][2], 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn regression_matches_normal_equation_oracle() {
        let ds = random_dataset(6, 40, 2, 2);
        let regs = fit_group_regressions(&ds, false).unwrap();
        for w in 0..2 {
            let members = ds.group(w);
            let mut xtx = DMatrix::<f64>::zeros(3, 3);
            let mut xty = DVector::<f64>::zeros(3);
            for &i in members {
                let row = [
                    1.0,
                    ds.covariates()[(i, 0)],
                    ds.covariates()[(i, 1)],
                ];
                for a in 0..3 {
                    xty[a] += row[a] * ds.outcome(i);
                    for b in 0..3 {
                        xtx[(a, b)] += row[a] * row[b];
                    }
                }
            }
            let oracle: nalgebra::DVector<f64> = xtx.try_inverse().unwrap() * xty;
            for c in 0..3 {
                assert_abs_diff_eq!(regs.beta[w][c], oracle[c], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn residuals_orthogonal_to_design() {
        let ds = random_dataset(7, 60, 2, 2);
        let regs = fit_group_regressions(&ds, true).unwrap();
        for w in 0..2 {
            let mut dot_intercept = 0.0;
            let mut dot_x0 = 0.0;
            for &i in ds.group(w) {
                let e = ds.outcome(i) - regs.predict_unit(&ds, w, i);
                dot_intercept += e;
                dot_x0 += e * ds.covariates()[(i, 0)];
            }
            assert_abs_diff_eq!(dot_intercept, 0.0, epsilon = 1e-8);
            assert_abs_diff_eq!(dot_x0, 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn bias_correction_routes_agree() {
        let ds = random_dataset(8, 36, 3, 2);
        let t = 0;
        let matches = matched(&ds, t, 1);
        let regs = fit_group_regressions(&ds, false).unwrap();
        let basic = impute_basic(&ds, &matches).unwrap();
        let bc = impute_bias_corrected(&ds, &matches, &regs).unwrap();
        let est_basic = estimate_att(&ds, &basic, &matches, t).unwrap();
        let est_bc = estimate_att(&ds, &bc, &matches, t).unwrap();
        let b = bias_terms(&ds, &matches, &regs, t).unwrap();
        for (q, &(j, k)) in est_bc.pair_order.iter().enumerate() {
            let subtraction_route = est_basic.tau_hat[q] - (b[k] - b[j]);
            assert_abs_diff_eq!(est_bc.tau_hat[q], subtraction_route, epsilon = 1e-10);
        }
    }

    #[test]
    fn bias_correction_exact_under_linear_truth() {
        // Potential outcomes exactly linear in x, no noise: the corrected
        // estimator recovers the exact sample estimand difference.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let beta = [[1.0, 2.0], [0.5, -1.0], [3.0, 0.7]];
        let n = 45;
        let mut rows = Vec::new();
        let mut potentials = Vec::new();
        for i in 0..n {
            let x = rng.gen::<f64>() * 4.0 - 2.0;
            let t = if i < 6 { i % 3 } else { rng.gen_range(0..3) };
            let pot: Vec<f64> = (0..3).map(|w| beta[w][0] + beta[w][1] * x).collect();
            rows.push((vec![x], t, pot[t]));
            potentials.push(pot);
        }
        let ds = dataset(1, rows);
        let t = 0;
        let matches = matched(&ds, t, 1);
        let regs = fit_group_regressions(&ds, false).unwrap();
        let bc = impute_bias_corrected(&ds, &matches, &regs).unwrap();
        let est = estimate_att(&ds, &bc, &matches, t).unwrap();
        let n_t = ds.group_size(t) as f64;
        for (q, &(j, k)) in est.pair_order.iter().enumerate() {
            let truth: f64 = ds
                .group(t)
                .iter()
                .map(|&i| potentials[i][j] - potentials[i][k])
                .sum::<f64>()
                / n_t;
            assert_abs_diff_eq!(est.tau_hat[q], truth, epsilon = 1e-8);
        }
    }

    #[test]
    fn matched_unit_with_identical_covariates_gets_no_correction() {
        let ds = dataset(
            1,
            vec![
                (vec![1.0], 0, 10.0),
                (vec![1.0], 1, 4.0),
                (vec![2.0], 1, 6.0),
                (vec![3.0], 0, 8.0),
                (vec![4.0], 2, 1.0),
                (vec![5.0], 2, 3.0),
                (vec![2.5], 0, 9.0),
                (vec![3.5], 1, 5.0),
                (vec![6.0], 2, 2.0),
            ],
        );
        let matches = matched(&ds, 0, 1);
        let regs = fit_group_regressions(&ds, false).unwrap();
        let basic = impute_basic(&ds, &matches).unwrap();
        let bc = impute_bias_corrected(&ds, &matches, &regs).unwrap();
        // Unit 0 (x = 1.0) matches unit 1 (x = 1.0) in group 1.
        assert_eq!(matches.matches(0, 1).unwrap(), &[1]);
        assert_abs_diff_eq!(bc.yhat[(0, 1)], basic.yhat[(0, 1)], epsilon = 1e-12);
    }

    #[test]
    fn ate_weights_by_sample_shares() {
        let ds = random_dataset(10, 60, 3, 2);
        let per_ref: Vec<EffectEstimate> = (0..3)
            .map(|t| {
                let matches = matched(&ds, t, 1);
                let imputed = impute_basic(&ds, &matches).unwrap();
                estimate_att(&ds, &imputed, &matches, t).unwrap()
            })
            .collect();
        let ate = estimate_ate(&ds, &per_ref).unwrap();
        let n = ds.n() as f64;
        for q in 0..ate.tau_hat.len() {
            let expect: f64 = (0..3)
                .map(|t| ds.group_size(t) as f64 / n * per_ref[t].tau_hat[q])
                .sum();
            assert_abs_diff_eq!(ate.tau_hat[q], expect, epsilon = 1e-12);
        }
        // Missing reference is an error.
        assert!(matches!(
            estimate_ate(&ds, &per_ref[..2]),
            Err(Error::MissingReference(2))
        ));
    }

    #[test]
    fn identical_tau_across_references_is_preserved() {
        let ds = random_dataset(11, 45, 3, 1);
        let template = {
            let matches = matched(&ds, 0, 1);
            let imputed = impute_basic(&ds, &matches).unwrap();
            estimate_att(&ds, &imputed, &matches, 0).unwrap()
        };
        let per_ref: Vec<EffectEstimate> = (0..3)
            .map(|t| EffectEstimate {
                reference: Reference::Treated(t),
                ..template.clone()
            })
            .collect();
        let ate = estimate_ate(&ds, &per_ref).unwrap();
        for q in 0..ate.tau_hat.len() {
            assert_abs_diff_eq!(ate.tau_hat[q], template.tau_hat[q], epsilon = 1e-12);
        }
    }

    #[test]
    fn full_group_matching_reduces_to_difference_of_means() {
        // Identical covariates and m equal to the full group size: the ATT
        // becomes the plain difference of group means.
        let rows: Vec<(Vec<f64>, usize, f64)> = (0..12)
            .map(|i| (vec![0.0], i % 3, (i * i % 11) as f64))
            .collect();
        let ds = dataset(1, rows);
        let matches = matched(&ds, 0, 4);
        let imputed = impute_basic(&ds, &matches).unwrap();
        let est = estimate_att(&ds, &imputed, &matches, 0).unwrap();
        let mean = |w: usize| {
            ds.group(w).iter().map(|&i| ds.outcome(i)).sum::<f64>() / ds.group_size(w) as f64
        };
        for (q, &(j, k)) in est.pair_order.iter().enumerate() {
            assert_abs_diff_eq!(est.tau_hat[q], mean(j) - mean(k), epsilon = 1e-12);
        }
    }
}
