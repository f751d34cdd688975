//! Match-set construction: cross-group nearest neighbors, vector matching,
//! and within-group matching for the conditional variance estimator.
//!
//! Matching is always with replacement. Ties are broken by the lowest
//! original unit index, everywhere.

use nalgebra::DMatrix;

use crate::data::{Dataset, EstimandSpec, Reference};
use crate::error::{Error, Result};
use crate::gps::{logit_scores, GpsModel};
use crate::kmeans;
use crate::parallel;

/// Match sets and usage counts for one matching run.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// `cross[i][w]`: the ordered match set of unit `i` into group `w`, when
    /// unit `i` required imputation for group `w` under the requested scope.
    pub cross: Vec<Vec<Option<Vec<usize>>>>,
    /// `within[i]`: the J nearest same-group units to `i`, excluding `i`.
    pub within: Option<Vec<Vec<usize>>>,
    /// `psi[i][w]`: times unit `i` served as a match to a group-`w` unit.
    pub psi: Vec<Vec<u32>>,
    pub m: usize,
    pub j_within: usize,
    pub distance_spec: String,
}

impl MatchResult {
    fn empty(n: usize, z: usize, m: usize, distance_spec: String) -> Self {
        MatchResult {
            cross: vec![vec![None; z]; n],
            within: None,
            psi: vec![vec![0; z]; n],
            m,
            j_within: 0,
            distance_spec,
        }
    }

    pub fn matches(&self, unit: usize, group: usize) -> Result<&[usize]> {
        self.cross[unit][group]
            .as_deref()
            .ok_or(Error::MissingMatches { unit, group })
    }

    /// Copies within-group match sets from another run into this one.
    pub fn adopt_within(&mut self, other: &MatchResult) {
        self.within = other.within.clone();
        self.j_within = other.j_within;
    }
}

/// Distance measures for cross-group matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    LogitGpsEuclid,
    MahalanobisCovariates,
    EuclidCovariates,
}

impl DistanceKind {
    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::LogitGpsEuclid => "logit-gps-euclid",
            DistanceKind::MahalanobisCovariates => "mahalanobis-covariates",
            DistanceKind::EuclidCovariates => "euclid-covariates",
        }
    }
}

/// A metric over unit pairs, realized as squared Euclidean distance on
/// precomputed per-unit feature rows.
#[derive(Debug, Clone)]
pub struct Metric {
    features: DMatrix<f64>,
    pub spec: String,
}

impl Metric {
    /// Squared distance between units `i` and `j`. Symmetric, zero diagonal.
    pub fn dist2(&self, i: usize, j: usize) -> f64 {
        let mut acc = 0.0;
        for c in 0..self.features.ncols() {
            let d = self.features[(i, c)] - self.features[(j, c)];
            acc += d * d;
        }
        acc
    }

    pub fn from_features(features: DMatrix<f64>, spec: &str) -> Self {
        Metric {
            features,
            spec: spec.to_string(),
        }
    }
}

/// Builds a metric evaluator of the requested kind.
pub fn distance_metric(ds: &Dataset, gps: Option<&GpsModel>, kind: DistanceKind) -> Result<Metric> {
    let features = match kind {
        DistanceKind::EuclidCovariates => ds.covariates().clone(),
        DistanceKind::LogitGpsEuclid => {
            let model = gps.expect("logit-gps metric requires a fitted GPS model");
            logit_scores(model)
        }
        DistanceKind::MahalanobisCovariates => {
            let x = ds.covariates();
            let n = x.nrows() as f64;
            let means: Vec<f64> = (0..x.ncols())
                .map(|c| x.column(c).sum() / n)
                .collect();
            let mut centered = x.clone();
            for i in 0..x.nrows() {
                for c in 0..x.ncols() {
                    centered[(i, c)] -= means[c];
                }
            }
            let cov = centered.transpose() * &centered / (n - 1.0);
            let chol = cov.clone().cholesky().ok_or_else(|| {
                let eig = cov.symmetric_eigenvalues();
                Error::SingularCovariance(eig.iter().cloned().fold(f64::INFINITY, f64::min))
            })?;
            // Whiten: rows become L^{-1} (x - mean), so squared Euclidean
            // distance equals the Mahalanobis distance.
            let whitened = chol.l().solve_lower_triangular(&centered.transpose()).ok_or(
                Error::SingularCovariance(0.0),
            )?;
            whitened.transpose()
        }
    };
    Ok(Metric {
        features,
        spec: kind.name().to_string(),
    })
}

/// Returns the `m` nearest members of `candidates` to the key `0..`, given a
/// per-candidate distance closure. Ties break toward the lower unit index.
fn select_nearest(
    candidates: &[usize],
    m: usize,
    mut dist: impl FnMut(usize) -> f64,
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates.iter().map(|&j| (dist(j), j)).collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    scored.truncate(m);
    scored.into_iter().map(|(_, j)| j).collect()
}

/// Cross-group matching never matches a unit into its own group, so a group
/// only needs `m` members (within-group matching needs `m + 1`).
fn check_cross_group_sizes(ds: &Dataset, m: usize) -> Result<()> {
    for w in 0..ds.z() {
        if ds.group_size(w) < m {
            return Err(Error::GroupTooSmall {
                label: ds.label(w).to_string(),
                size: ds.group_size(w),
                required: m,
            });
        }
    }
    Ok(())
}

fn imputing_units(ds: &Dataset, scope: &EstimandSpec) -> Vec<usize> {
    match scope.reference {
        Reference::Treated(t) => ds.group(t).to_vec(),
        Reference::All => (0..ds.n()).collect(),
    }
}

fn target_groups(scope: &EstimandSpec) -> Vec<usize> {
    let mut groups: Vec<usize> = scope
        .pairs
        .iter()
        .flat_map(|&(j, k)| [j, k])
        .collect();
    groups.sort_unstable();
    groups.dedup();
    groups
}

/// Nearest-neighbor matching with replacement under an arbitrary metric.
pub fn knn_match(
    ds: &Dataset,
    metric: &Metric,
    m: usize,
    scope: &EstimandSpec,
) -> Result<MatchResult> {
    check_cross_group_sizes(ds, m)?;
    let mut result = MatchResult::empty(ds.n(), ds.z(), m, metric.spec.clone());
    let units = imputing_units(ds, scope);
    let groups = target_groups(scope);
    let sets: Vec<Vec<(usize, Vec<usize>)>> = parallel::map_indexed(units.len(), |u| {
        let i = units[u];
        groups
            .iter()
            .filter(|&&w| w != ds.group_of(i))
            .map(|&w| (w, select_nearest(ds.group(w), m, |j| metric.dist2(i, j))))
            .collect()
    });
    for (u, per_group) in sets.into_iter().enumerate() {
        let i = units[u];
        let gi = ds.group_of(i);
        for (w, set) in per_group {
            for &j in &set {
                result.psi[j][gi] += 1;
            }
            result.cross[i][w] = Some(set);
        }
    }
    Ok(result)
}

/// Vector matching: stratify all units by k-means clusters of the "other"
/// logit-GPS components, then nearest-neighbor match on the target component
/// within strata, falling back to the whole target group when a stratum is
/// too small.
pub fn vector_match(
    ds: &Dataset,
    gps: &GpsModel,
    t: usize,
    m: usize,
    k_clusters: usize,
    seed: u64,
) -> Result<MatchResult> {
    if k_clusters < 1 {
        return Err(Error::InvalidClusterCount);
    }
    if t >= ds.z() {
        return Err(Error::InvalidLabel(t));
    }
    check_cross_group_sizes(ds, m)?;
    let logits = logit_scores(gps);
    let z = ds.z();
    let mut result = MatchResult::empty(
        ds.n(),
        z,
        m,
        format!("vector-match(K={k_clusters})"),
    );
    let ref_units = ds.group(t).to_vec();
    for w in 0..z {
        if w == t {
            continue;
        }
        let strata: Vec<usize> = {
            let other: Vec<usize> = (0..z).filter(|&c| c != t && c != w).collect();
            if other.is_empty() || k_clusters == 1 {
                // No free components (or a single cluster): plain 1-d matching.
                vec![0; ds.n()]
            } else {
                let mut pts = Vec::with_capacity(ds.n() * other.len());
                for i in 0..ds.n() {
                    for &c in &other {
                        pts.push(logits[(i, c)]);
                    }
                }
                kmeans::cluster(
                    &pts,
                    other.len(),
                    k_clusters,
                    10,
                    seed.wrapping_add(w as u64),
                )
            }
        };
        // Group-w members bucketed by stratum, preserving index order.
        let mut by_stratum: Vec<Vec<usize>> = vec![Vec::new(); k_clusters.max(1)];
        for &j in ds.group(w) {
            by_stratum[strata[j]].push(j);
        }
        let sets: Vec<Vec<usize>> = parallel::map_indexed(ref_units.len(), |u| {
            let i = ref_units[u];
            let local = &by_stratum[strata[i]];
            let candidates: &[usize] = if local.len() >= m { local } else { ds.group(w) };
            select_nearest(candidates, m, |j| {
                let d = logits[(i, w)] - logits[(j, w)];
                d * d
            })
        });
        for (u, set) in sets.into_iter().enumerate() {
            let i = ref_units[u];
            for &j in &set {
                result.psi[j][t] += 1;
            }
            result.cross[i][w] = Some(set);
        }
    }
    Ok(result)
}

/// Within-group matching on the full logit-GPS vector, used for the
/// conditional variance estimator.
pub fn within_group_match(ds: &Dataset, gps: &GpsModel, j_count: usize) -> Result<MatchResult> {
    ds.check_group_sizes(j_count)?;
    let logits = logit_scores(gps);
    let within: Vec<Vec<usize>> = parallel::map_indexed(ds.n(), |i| {
        let own: Vec<usize> = ds
            .group(ds.group_of(i))
            .iter()
            .copied()
            .filter(|&j| j != i)
            .collect();
        select_nearest(&own, j_count, |j| {
            (0..ds.z())
                .map(|c| {
                    let d = logits[(i, c)] - logits[(j, c)];
                    d * d
                })
                .sum()
        })
    });
    let mut result = MatchResult::empty(ds.n(), ds.z(), 0, "within-group-logit-gps".to_string());
    result.within = Some(within);
    result.j_within = j_count;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RawRow;
    use crate::gps::fit_gps;
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
                (x, t, rng.gen::<f64>())
            })
            .collect();
        dataset(p, rows)
    }

    /// Exhaustive-scan oracle for the m nearest group-w units to unit i.
    fn brute_nearest(ds: &Dataset, metric: &Metric, i: usize, w: usize, m: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = ds
            .group(w)
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| (metric.dist2(i, j), j))
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        all.truncate(m);
        all.into_iter().map(|(_, j)| j).collect()
    }

    #[test]
    fn knn_matches_brute_force_oracle() {
        let ds = random_dataset(5, 30, 3, 3);
        let metric = distance_metric(&ds, None, DistanceKind::EuclidCovariates).unwrap();
        let scope = EstimandSpec::all_pairs(Reference::Treated(0), 3);
        let result = knn_match(&ds, &metric, 2, &scope).unwrap();
        for &i in ds.group(0) {
            for w in 1..3 {
                assert_eq!(
                    result.matches(i, w).unwrap(),
                    brute_nearest(&ds, &metric, i, w, 2).as_slice()
                );
            }
        }
    }

    #[test]
    fn identical_covariates_break_ties_to_lowest_index() {
        let rows: Vec<(Vec<f64>, usize, f64)> = (0..9).map(|i| (vec![1.0], i % 3, i as f64)).collect();
        let ds = dataset(1, rows);
        let metric = distance_metric(&ds, None, DistanceKind::EuclidCovariates).unwrap();
        let scope = EstimandSpec::all_pairs(Reference::Treated(0), 3);
        let result = knn_match(&ds, &metric, 1, &scope).unwrap();
        // Lowest-index group-1 unit is 1; lowest-index group-2 unit is 2.
        for &i in ds.group(0) {
            assert_eq!(result.matches(i, 1).unwrap(), &[1]);
            assert_eq!(result.matches(i, 2).unwrap(), &[2]);
        }
        assert_eq!(result.psi[1][0], 3);
        assert_eq!(result.psi[2][0], 3);
    }

    #[test]
    fn psi_conservation_and_self_exclusion() {
        let ds = random_dataset(6, 40, 3, 2);
        let metric = distance_metric(&ds, None, DistanceKind::EuclidCovariates).unwrap();
        let scope = EstimandSpec::all_pairs(Reference::Treated(1), 3);
        let m = 2;
        let result = knn_match(&ds, &metric, m, &scope).unwrap();
        for w in [0usize, 2] {
            let total: u32 = ds.group(w).iter().map(|&i| result.psi[i][1]).sum();
            assert_eq!(total as usize, m * ds.group_size(1));
        }
        for &i in ds.group(1) {
            for w in [0usize, 2] {
                assert!(!result.matches(i, w).unwrap().contains(&i));
            }
            assert_eq!(result.psi[i][1], 0);
        }
    }

    #[test]
    fn knn_invariant_to_metric_rescaling() {
        let ds = random_dataset(8, 30, 3, 2);
        let metric = distance_metric(&ds, None, DistanceKind::EuclidCovariates).unwrap();
        let scaled = Metric::from_features(ds.covariates().map(|v| v * 7.5), "scaled");
        let scope = EstimandSpec::all_pairs(Reference::Treated(0), 3);
        let a = knn_match(&ds, &metric, 1, &scope).unwrap();
        let b = knn_match(&ds, &scaled, 1, &scope).unwrap();
        for &i in ds.group(0) {
            for w in 1..3 {
                assert_eq!(a.matches(i, w).unwrap(), b.matches(i, w).unwrap());
            }
        }
    }

    #[test]
    fn group_too_small_for_m_is_an_error() {
        let ds = random_dataset(9, 12, 3, 1);
        let metric = distance_metric(&ds, None, DistanceKind::EuclidCovariates).unwrap();
        let scope = EstimandSpec::all_pairs(Reference::Treated(0), 3);
        let m = ds.group_size(1).min(ds.group_size(2)).max(ds.group_size(0));
        assert!(matches!(
            knn_match(&ds, &metric, m + 5, &scope),
            Err(Error::GroupTooSmall { .. })
        ));
    }

    #[test]
    fn mahalanobis_equals_euclid_after_whitening() {
        let ds = random_dataset(10, 50, 2, 3);
        let metric = distance_metric(&ds, None, DistanceKind::MahalanobisCovariates).unwrap();
        // Oracle: explicit inverse-covariance quadratic form.
        let x = ds.covariates();
        let n = x.nrows() as f64;
        let means: Vec<f64> = (0..3).map(|c| x.column(c).sum() / n).collect();
        let mut centered = x.clone();
        for i in 0..x.nrows() {
            for c in 0..3 {
                centered[(i, c)] -= means[c];
            }
        }
        let cov = centered.transpose() * &centered / (n - 1.0);
        let inv = cov.try_inverse().unwrap();
        for (i, j) in [(0, 1), (3, 17), (8, 40)] {
            let d = x.row(i) - x.row(j);
            let expect = (&d * &inv * d.transpose())[(0, 0)];
            assert_abs_diff_eq!(metric.dist2(i, j), expect, epsilon = 1e-8);
        }
        assert_abs_diff_eq!(metric.dist2(4, 4), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn euclid_metric_direct_value() {
        let ds = dataset(
            1,
            vec![
                (vec![0.0], 0, 0.0),
                (vec![3.0], 1, 0.0),
                (vec![1.0], 0, 0.0),
                (vec![2.0], 1, 0.0),
            ],
        );
        let metric = distance_metric(&ds, None, DistanceKind::EuclidCovariates).unwrap();
        assert_abs_diff_eq!(metric.dist2(0, 1).sqrt(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn within_group_match_oracle_and_forced_pairs() {
        let ds = random_dataset(12, 24, 3, 2);
        let gps = fit_gps(&ds).unwrap();
        let result = within_group_match(&ds, &gps, 1).unwrap();
        let logits = logit_scores(&gps);
        let within = result.within.as_ref().unwrap();
        for i in 0..ds.n() {
            let own: Vec<usize> = ds
                .group(ds.group_of(i))
                .iter()
                .copied()
                .filter(|&j| j != i)
                .collect();
            let mut scored: Vec<(f64, usize)> = own
                .iter()
                .map(|&j| {
                    let d: f64 = (0..3)
                        .map(|c| (logits[(i, c)] - logits[(j, c)]).powi(2))
                        .sum();
                    (d, j)
                })
                .collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            assert_eq!(within[i], vec![scored[0].1]);
            assert_ne!(within[i][0], i);
        }
    }

    #[test]
    fn within_group_pair_of_two_matches_each_other() {
        let ds = dataset(
            1,
            vec![
                (vec![0.0], 0, 1.0),
                (vec![1.0], 0, 2.0),
                (vec![0.5], 1, 3.0),
                (vec![1.5], 1, 4.0),
            ],
        );
        let gps = fit_gps(&ds).unwrap();
        let result = within_group_match(&ds, &gps, 1).unwrap();
        let within = result.within.as_ref().unwrap();
        assert_eq!(within[0], vec![1]);
        assert_eq!(within[1], vec![0]);
        assert_eq!(within[2], vec![3]);
        assert_eq!(within[3], vec![2]);
    }

    #[test]
    fn vector_match_k1_is_global_one_dim_matching() {
        let ds = random_dataset(20, 45, 3, 2);
        let gps = fit_gps(&ds).unwrap();
        let logits = logit_scores(&gps);
        let result = vector_match(&ds, &gps, 0, 1, 1, 99).unwrap();
        for &i in ds.group(0) {
            for w in 1..3 {
                let mut scored: Vec<(f64, usize)> = ds
                    .group(w)
                    .iter()
                    .map(|&j| ((logits[(i, w)] - logits[(j, w)]).powi(2), j))
                    .collect();
                scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                assert_eq!(result.matches(i, w).unwrap(), &[scored[0].1]);
            }
        }
    }

    #[test]
    fn vector_match_z2_equals_knn_on_logit_distance() {
        let ds = random_dataset(21, 40, 2, 2);
        let gps = fit_gps(&ds).unwrap();
        let vm = vector_match(&ds, &gps, 0, 1, 5, 7).unwrap();
        let logits = logit_scores(&gps);
        let metric = Metric::from_features(
            DMatrix::from_iterator(ds.n(), 1, (0..ds.n()).map(|i| logits[(i, 1)])),
            "logit-target",
        );
        let scope = EstimandSpec::all_pairs(Reference::Treated(0), 2);
        let knn = knn_match(&ds, &metric, 1, &scope).unwrap();
        for &i in ds.group(0) {
            assert_eq!(vm.matches(i, 1).unwrap(), knn.matches(i, 1).unwrap());
        }
    }

    #[test]
    fn vector_match_equals_cluster_scan_oracle() {
        let ds = random_dataset(22, 150, 3, 3);
        let gps = fit_gps(&ds).unwrap();
        let logits = logit_scores(&gps);
        let (t, m, k, seed) = (0usize, 1usize, 5usize, 31u64);
        let result = vector_match(&ds, &gps, t, m, k, seed).unwrap();
        for w in 1..3 {
            // Recreate the stratification exactly, then scan exhaustively.
            let other: Vec<usize> = (0..3).filter(|&c| c != t && c != w).collect();
            let pts: Vec<f64> = (0..ds.n())
                .flat_map(|i| other.iter().map(move |&c| (i, c)))
                .map(|(i, c)| logits[(i, c)])
                .collect();
            let strata = kmeans::cluster(&pts, other.len(), k, 10, seed.wrapping_add(w as u64));
            for &i in ds.group(t) {
                let local: Vec<usize> = ds
                    .group(w)
                    .iter()
                    .copied()
                    .filter(|&j| strata[j] == strata[i])
                    .collect();
                let candidates = if local.len() >= m {
                    local
                } else {
                    ds.group(w).to_vec()
                };
                let mut scored: Vec<(f64, usize)> = candidates
                    .iter()
                    .map(|&j| ((logits[(i, w)] - logits[(j, w)]).powi(2), j))
                    .collect();
                scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let expect: Vec<usize> = scored.into_iter().take(m).map(|(_, j)| j).collect();
                assert_eq!(result.matches(i, w).unwrap(), expect.as_slice());
            }
        }
    }

    #[test]
    fn vector_match_rejects_zero_clusters() {
        let ds = random_dataset(23, 30, 3, 2);
        let gps = fit_gps(&ds).unwrap();
        assert!(matches!(
            vector_match(&ds, &gps, 0, 1, 0, 1),
            Err(Error::InvalidClusterCount)
        ));
    }

    #[test]
    fn single_unit_groups_force_the_only_match() {
        // Two units per group is the validation minimum; check forced
        // matching with m = 1 where each group has exactly 2 units.
        let ds = dataset(
            1,
            vec![
                (vec![0.0], 0, 1.0),
                (vec![10.0], 1, 2.0),
                (vec![20.0], 2, 3.0),
                (vec![1.0], 0, 4.0),
                (vec![11.0], 1, 5.0),
                (vec![21.0], 2, 6.0),
            ],
        );
        let metric = distance_metric(&ds, None, DistanceKind::EuclidCovariates).unwrap();
        let scope = EstimandSpec::all_pairs(Reference::Treated(0), 3);
        let result = knn_match(&ds, &metric, 1, &scope).unwrap();
        assert_eq!(result.matches(0, 1).unwrap(), &[1]);
        assert_eq!(result.matches(0, 2).unwrap(), &[2]);
        assert_eq!(result.matches(3, 1).unwrap(), &[1]);
    }
}
