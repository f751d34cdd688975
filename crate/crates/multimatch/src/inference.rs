//! Global chi-square test, confidence-region membership, and
//! Bonferroni-adjusted pairwise intervals.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{EffectEstimate, Variant};
use crate::stats::{chi2_quantile, chi2_sf, normal_quantile};

#[derive(Debug, Clone, Serialize)]
pub struct PairInterval {
    pub pair: (usize, usize),
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferenceReport {
    pub z2: f64,
    pub df: usize,
    pub p_value: f64,
    pub alpha: f64,
    /// Chi-square radius of the confidence region.
    pub region_radius2: f64,
    pub pair_intervals: Vec<PairInterval>,
    /// Per-pair adjusted level, `alpha / p`.
    pub adjusted_alpha: f64,
    /// Set for the basic variant: the statistic is computed without the
    /// conditional bias term, which is unobservable on real data.
    pub bias_term_caveat: bool,
    /// Rank used when the pseudo-inverse fallback engaged.
    pub effective_df: usize,
}

/// Policy for singular effect covariances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SingularPolicy {
    #[default]
    Error,
    /// Fall back to a pseudo-inverse and report reduced degrees of freedom.
    PseudoInverse,
}

fn covariance_of(est: &EffectEstimate) -> Result<&DMatrix<f64>> {
    est.covariance
        .as_ref()
        .ok_or(Error::Config("estimate carries no covariance".to_string()))
}

/// Quadratic form `d^T cov^{-1} d` via a linear solve. Falls back to the
/// eigendecomposition pseudo-inverse when allowed, returning the rank used.
fn quadratic_form(
    cov: &DMatrix<f64>,
    d: &DVector<f64>,
    policy: SingularPolicy,
) -> Result<(f64, usize)> {
    let p = cov.nrows();
    if d.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: d.len(),
        });
    }
    if policy == SingularPolicy::Error {
        // Fast path; a failed factorization is surfaced, not papered over.
        return match cov.clone().cholesky() {
            Some(chol) => {
                let solved = chol.solve(d);
                Ok((d.dot(&solved), p))
            }
            None => {
                let eigen = cov.clone().symmetric_eigen();
                let min_eig = eigen
                    .eigenvalues
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min);
                Err(Error::SingularEffectCovariance(min_eig))
            }
        };
    }
    // Pseudo-inverse: rank-truncate unconditionally. Cholesky can succeed on
    // a structurally singular matrix through roundoff, and the near-null
    // direction would then pollute the quadratic form.
    let eigen = cov.clone().symmetric_eigen();
    match policy {
        SingularPolicy::Error => unreachable!(),
        SingularPolicy::PseudoInverse => {
            let max_eig = eigen
                .eigenvalues
                .iter()
                .cloned()
                .fold(0.0f64, |a, b| a.max(b.abs()));
            let tol = max_eig * 1e-12;
            let mut z2 = 0.0;
            let mut rank = 0;
            for (idx, &lambda) in eigen.eigenvalues.iter().enumerate() {
                if lambda > tol {
                    let proj = eigen.eigenvectors.column(idx).dot(d);
                    z2 += proj * proj / lambda;
                    rank += 1;
                }
            }
            Ok((z2, rank))
        }
    }
}

/// Global test of `tau = null_tau` using the chi-square pivot.
pub fn global_test(
    est: &EffectEstimate,
    null_tau: &DVector<f64>,
    alpha: f64,
    policy: SingularPolicy,
) -> Result<InferenceReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let cov = covariance_of(est)?;
    let d = &est.tau_hat - null_tau;
    let (z2, rank) = quadratic_form(cov, &d, policy)?;
    let p = est.tau_hat.len();
    // The reference distribution is chi-square with `p` degrees of freedom,
    // one per pairwise effect, even when the covariance is rank-deficient;
    // `effective_df` records the rank actually used in the quadratic form.
    Ok(InferenceReport {
        z2,
        df: p,
        p_value: chi2_sf(z2, p),
        alpha,
        region_radius2: chi2_quantile(1.0 - alpha, p),
        pair_intervals: bonferroni_intervals(est, alpha)?,
        adjusted_alpha: alpha / p as f64,
        bias_term_caveat: est.variant == Variant::Basic,
        effective_df: rank,
    })
}

/// True iff `true_tau` lies inside the `1 - alpha` confidence ellipsoid.
pub fn region_covers(
    est: &EffectEstimate,
    true_tau: &DVector<f64>,
    alpha: f64,
    policy: SingularPolicy,
) -> Result<bool> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let cov = covariance_of(est)?;
    let d = &est.tau_hat - true_tau;
    let (z2, _rank) = quadratic_form(cov, &d, policy)?;
    // Same radius as `global_test`: chi-square with one degree of freedom
    // per pairwise effect, regardless of covariance rank.
    Ok(z2 <= chi2_quantile(1.0 - alpha, est.tau_hat.len()))
}

/// Bonferroni-adjusted normal-quantile intervals, one per pair.
pub fn bonferroni_intervals(est: &EffectEstimate, alpha: f64) -> Result<Vec<PairInterval>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let cov = covariance_of(est)?;
    let p = est.tau_hat.len();
    let q = normal_quantile(1.0 - alpha / (2.0 * p as f64));
    est.pair_order
        .iter()
        .enumerate()
        .map(|(idx, &pair)| {
            let var = cov[(idx, idx)];
            if var < 0.0 {
                return Err(Error::Config(format!(
                    "negative variance for pair {pair:?}"
                )));
            }
            let half = q * var.sqrt();
            Ok(PairInterval {
                pair,
                lo: est.tau_hat[idx] - half,
                hi: est.tau_hat[idx] + half,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Reference;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn estimate(tau: &[f64], cov: DMatrix<f64>) -> EffectEstimate {
        EffectEstimate {
            reference: Reference::Treated(0),
            pair_order: vec![(0, 1), (0, 2), (1, 2)],
            tau_hat: DVector::from_column_slice(tau),
            covariance: Some(cov),
            ybar: vec![0.0; 3],
            variant: Variant::Basic,
            se_method: Some("new".into()),
            m: 1,
            j_within: 1,
            covariance_unreliable: false,
        }
    }

    #[test]
    fn zero_offset_gives_zero_statistic() {
        let est = estimate(&[1.0, 2.0, 3.0], DMatrix::identity(3, 3));
        let null = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let rep = global_test(&est, &null, 0.05, SingularPolicy::Error).unwrap();
        assert_abs_diff_eq!(rep.z2, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(rep.p_value, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.region_radius2, 7.8147, epsilon = 1e-3);
        assert!(rep.bias_term_caveat);
    }

    #[test]
    fn identity_covariance_unit_offsets() {
        let est = estimate(&[1.0, 1.0, 1.0], DMatrix::identity(3, 3));
        let null = DVector::zeros(3);
        let rep = global_test(&est, &null, 0.05, SingularPolicy::Error).unwrap();
        assert_abs_diff_eq!(rep.z2, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn region_membership_basics() {
        let est = estimate(&[0.0, 0.0, 0.0], DMatrix::identity(3, 3));
        let center = DVector::zeros(3);
        assert!(region_covers(&est, &center, 0.05, SingularPolicy::Error).unwrap());
        let far = DVector::from_column_slice(&[10.0, 0.0, 0.0]);
        assert!(!region_covers(&est, &far, 0.05, SingularPolicy::Error).unwrap());
    }

    #[test]
    fn singular_covariance_errors_unless_pseudo_inverse() {
        let mut cov = DMatrix::identity(3, 3);
        cov[(2, 2)] = 0.0;
        let est = estimate(&[1.0, 0.0, 0.0], cov);
        let null = DVector::zeros(3);
        assert!(matches!(
            global_test(&est, &null, 0.05, SingularPolicy::Error),
            Err(Error::SingularEffectCovariance(_))
        ));
        let rep = global_test(&est, &null, 0.05, SingularPolicy::PseudoInverse).unwrap();
        assert_eq!(rep.effective_df, 2);
        assert_abs_diff_eq!(rep.z2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bonferroni_intervals_direct_values() {
        let est = estimate(&[1.0, 2.0, 3.0], DMatrix::identity(3, 3));
        let ivs = bonferroni_intervals(&est, 0.05).unwrap();
        let q = 2.3939798;
        for (idx, iv) in ivs.iter().enumerate() {
            assert_abs_diff_eq!(iv.lo, (idx + 1) as f64 - q, epsilon = 1e-4);
            assert_abs_diff_eq!(iv.hi, (idx + 1) as f64 + q, epsilon = 1e-4);
        }
        // Zero variance degenerates to the point estimate.
        let est0 = estimate(&[1.0, 2.0, 3.0], DMatrix::zeros(3, 3));
        let ivs0 = bonferroni_intervals(&est0, 0.05).unwrap();
        assert_abs_diff_eq!(ivs0[0].lo, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ivs0[0].hi, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn invalid_alpha_rejected() {
        let est = estimate(&[0.0, 0.0, 0.0], DMatrix::identity(3, 3));
        assert!(matches!(
            bonferroni_intervals(&est, 1.5),
            Err(Error::InvalidAlpha(_))
        ));
    }

    #[test]
    fn statistic_invariant_under_joint_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10 {
            let tau: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let a = DMatrix::from_fn(3, 3, |_, _| rng.gen::<f64>() - 0.5);
            let cov = &a * a.transpose() + DMatrix::identity(3, 3) * 0.5;
            let est = estimate(&tau, cov.clone());
            let null = DVector::zeros(3);
            let z2 = global_test(&est, &null, 0.05, SingularPolicy::Error)
                .unwrap()
                .z2;
            let c = 3.7;
            let scaled = estimate(
                &tau.iter().map(|v| v * c).collect::<Vec<_>>(),
                cov * c * c,
            );
            let z2_scaled = global_test(&scaled, &null, 0.05, SingularPolicy::Error)
                .unwrap()
                .z2;
            assert_abs_diff_eq!(z2, z2_scaled, epsilon = 1e-8);
        }
    }

    #[test]
    fn p_value_monotone_along_fixed_direction() {
        let est_at = |scale: f64| {
            estimate(
                &[scale, scale * 0.5, -scale * 0.5],
                DMatrix::identity(3, 3),
            )
        };
        let null = DVector::zeros(3);
        let mut last = f64::INFINITY;
        for step in 1..6 {
            let p = global_test(&est_at(step as f64 * 0.5), &null, 0.05, SingularPolicy::Error)
                .unwrap()
                .p_value;
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn region_invariant_to_pair_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let tau: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
        let a = DMatrix::from_fn(3, 3, |_, _| rng.gen::<f64>() - 0.5);
        let cov = &a * a.transpose() + DMatrix::identity(3, 3);
        let truth = DVector::from_column_slice(&[0.2, -0.1, 0.4]);
        let base = estimate(&tau, cov.clone());
        let covered = region_covers(&base, &truth, 0.05, SingularPolicy::Error).unwrap();
        // Swap the first two pairs everywhere.
        let perm = [1usize, 0, 2];
        let tau_p: Vec<f64> = perm.iter().map(|&q| tau[q]).collect();
        let cov_p = DMatrix::from_fn(3, 3, |r, c| cov[(perm[r], perm[c])]);
        let truth_p = DVector::from_column_slice(&[truth[1], truth[0], truth[2]]);
        let permuted = estimate(&tau_p, cov_p);
        assert_eq!(
            covered,
            region_covers(&permuted, &truth_p, 0.05, SingularPolicy::Error).unwrap()
        );
    }
}
