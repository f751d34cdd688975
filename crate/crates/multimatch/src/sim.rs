//! Monte Carlo harness: factorial data generation, per-replication
//! estimation, and coverage/bias/width aggregation.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::comparators::{dr_profile, ipw_profile, GroupProfile};
use crate::data::{lexicographic_pairs, Dataset, EstimandSpec, Reference};
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_att, fit_group_regressions, impute_basic, impute_bias_corrected, EffectEstimate,
    Variant,
};
use crate::gps::fit_gps;
use crate::inference::{bonferroni_intervals, region_covers, SingularPolicy};
use crate::matching::{vector_match, within_group_match};
use crate::parallel;
use crate::variance::{assemble_covariance, randomization_covariance, sigma2_raw, var_ybar};

const Z: usize = 3;
const PAIRS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateDist {
    Normal,
    T7,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseSurface {
    Identity,
    Exp,
}

/// Estimator / standard-error combinations evaluated per replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimEstimator {
    #[serde(rename = "B-N")]
    BasicNew,
    #[serde(rename = "BC-N")]
    BcNew,
    #[serde(rename = "B-R")]
    BasicRand,
    #[serde(rename = "BC-R")]
    BcRand,
    #[serde(rename = "IPW")]
    Ipw,
    #[serde(rename = "DR")]
    Dr,
}

impl SimEstimator {
    pub const ALL: [SimEstimator; 6] = [
        SimEstimator::BasicNew,
        SimEstimator::BcNew,
        SimEstimator::BasicRand,
        SimEstimator::BcRand,
        SimEstimator::Ipw,
        SimEstimator::Dr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SimEstimator::BasicNew => "B-N",
            SimEstimator::BcNew => "BC-N",
            SimEstimator::BasicRand => "B-R",
            SimEstimator::BcRand => "BC-R",
            SimEstimator::Ipw => "IPW",
            SimEstimator::Dr => "DR",
        }
    }
}

impl fmt::Display for SimEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One factorial cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub f: CovariateDist,
    pub g: ResponseSurface,
    /// Covariate count; must be a positive multiple of 3.
    pub p: usize,
    /// Mean-shift applied blockwise: group w gets b in covariate slots
    /// w, w+3, w+6, ...
    pub b: f64,
    /// Group-size ratio: sizes n1, gamma*n1, gamma^2*n1.
    pub gamma: usize,
    pub n1: usize,
    pub sigma2sq: f64,
    pub sigma3sq: f64,
    /// Common off-diagonal covariance.
    pub lambda: f64,
    /// Outcome coefficients drawn Uniform(-theta, theta).
    pub theta: f64,
    pub replications: usize,
    pub seed: u64,
    pub m: usize,
    pub j_within: usize,
    pub k_clusters: usize,
    pub alpha: f64,
    /// Rescale t7 draws to unit variance (off by default: the raw scale
    /// mixture has variance 7/5).
    #[serde(default)]
    pub standardize_t: bool,
    pub estimators: Vec<SimEstimator>,
}

impl SimConfig {
    /// A cell with the study's defaults filled in; callers override fields.
    pub fn baseline() -> Self {
        SimConfig {
            f: CovariateDist::Normal,
            g: ResponseSurface::Identity,
            p: 3,
            b: 0.0,
            gamma: 1,
            n1: 300,
            sigma2sq: 1.0,
            sigma3sq: 1.0,
            lambda: 0.25,
            theta: 1.0,
            replications: 200,
            seed: 1,
            m: 1,
            j_within: 1,
            k_clusters: 5,
            alpha: 0.05,
            standardize_t: false,
            estimators: SimEstimator::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.p % 3 != 0 {
            return Err(Error::Config(format!(
                "covariate count must be a positive multiple of 3, got {}",
                self.p
            )));
        }
        if self.gamma == 0 || self.n1 < 2 {
            return Err(Error::Config("need gamma >= 1 and n1 >= 2".to_string()));
        }
        if self.replications == 0 {
            return Err(Error::Config("need at least one replication".to_string()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        if self.m == 0 || self.j_within == 0 || self.k_clusters == 0 {
            return Err(Error::Config("m, J, and K must be positive".to_string()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators selected".to_string()));
        }
        Ok(())
    }

    pub fn group_sizes(&self) -> [usize; Z] {
        [self.n1, self.gamma * self.n1, self.gamma * self.gamma * self.n1]
    }

    /// Stable identifier hashing the full cell definition.
    pub fn cell_id(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut s = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            s.push_str(&format!("{byte:02x}"));
        }
        s
    }
}

/// A generated replication: the observed dataset plus the full n x Z
/// potential-outcome table.
#[derive(Debug, Clone)]
pub struct SimData {
    pub dataset: Dataset,
    pub potential: DMatrix<f64>,
}

fn rep_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + 1);
    rng
}

fn covariance_chol(p: usize, diag: f64, lambda: f64) -> Result<DMatrix<f64>> {
    let mut sigma = DMatrix::from_element(p, p, lambda);
    for d in 0..p {
        sigma[(d, d)] = diag;
    }
    sigma
        .cholesky()
        .map(|c| c.l())
        .ok_or(Error::NotPositiveDefinite)
}

pub fn generate_dataset(cfg: &SimConfig, rep: usize) -> Result<SimData> {
    cfg.validate()?;
    let mut rng = rep_rng(cfg.seed, rep);
    let sizes = cfg.group_sizes();
    let n: usize = sizes.iter().sum();
    let p = cfg.p;
    let chols = [
        covariance_chol(p, 1.0, cfg.lambda)?,
        covariance_chol(p, cfg.sigma2sq, cfg.lambda)?,
        covariance_chol(p, cfg.sigma3sq, cfg.lambda)?,
    ];
    let chi7 = ChiSquared::new(7.0).expect("valid dof");

    let mut x = DMatrix::zeros(n, p);
    let mut treatments = Vec::with_capacity(n);
    let mut row = 0;
    for (w, (&size, chol)) in sizes.iter().zip(&chols).enumerate() {
        for _ in 0..size {
            let zvec = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut draw = chol * zvec;
            if cfg.f == CovariateDist::T7 {
                let mut scale = (7.0 / rng.sample::<f64, _>(chi7)).sqrt();
                if cfg.standardize_t {
                    scale *= (5.0f64 / 7.0).sqrt();
                }
                draw *= scale;
            }
            for d in 0..p {
                // Group w's mean puts b in slots w, w+3, ...
                let shift = if d % 3 == w { cfg.b } else { 0.0 };
                x[(row, d)] = draw[d] + shift;
            }
            treatments.push(w);
            row += 1;
        }
    }

    // beta_w ~ Uniform(-theta, theta), drawn once per cell (stream 0), so
    // the response surface is a fixed property of the configuration and
    // systematic matching bias does not average out across replications.
    let mut cell_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    cell_rng.set_stream(0);
    let beta: Vec<DVector<f64>> = (0..Z)
        .map(|_| DVector::from_fn(p, |_, _| cell_rng.gen_range(-cfg.theta..=cfg.theta)))
        .collect();
    let mut potential = DMatrix::zeros(n, Z);
    for i in 0..n {
        for w in 0..Z {
            let mut mean = 0.0;
            for d in 0..p {
                let v = match cfg.g {
                    ResponseSurface::Identity => x[(i, d)],
                    ResponseSurface::Exp => x[(i, d)].exp(),
                };
                mean += v * beta[w][d];
            }
            let eps: f64 = rng.sample(StandardNormal);
            potential[(i, w)] = mean + eps;
        }
    }
    let outcomes: Vec<f64> = (0..n).map(|i| potential[(i, treatments[i])]).collect();
    let dataset = Dataset::from_parts(x, &treatments, &outcomes)?;
    Ok(SimData { dataset, potential })
}

/// Sample pairwise estimands over reference group `t`, lexicographic order.
pub fn true_estimands(data: &SimData, t: usize) -> Result<DVector<f64>> {
    let ds = &data.dataset;
    if t >= ds.z() {
        return Err(Error::InvalidLabel(t));
    }
    let pairs = lexicographic_pairs(ds.z());
    let n_t = ds.group_size(t) as f64;
    let mut out = DVector::zeros(pairs.len());
    for (q, &(j, k)) in pairs.iter().enumerate() {
        out[q] = ds
            .group(t)
            .iter()
            .map(|&i| data.potential[(i, j)] - data.potential[(i, k)])
            .sum::<f64>()
            / n_t;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct EstimatorOutcome {
    tau: [f64; PAIRS],
    se: [f64; PAIRS],
    region_covered: bool,
    interval_covered: [bool; PAIRS],
    width: [f64; PAIRS],
}

#[derive(Debug, Clone)]
struct RepOutcome {
    truth: [f64; PAIRS],
    per_estimator: Vec<EstimatorOutcome>,
}

fn profile_estimate(prof: &GroupProfile, m: usize, j_within: usize) -> Result<EffectEstimate> {
    let spec = EstimandSpec::all_pairs(Reference::Treated(prof.reference), Z);
    let tau = DVector::from_iterator(
        spec.pairs.len(),
        spec.pairs.iter().map(|&(j, k)| prof.mean[j] - prof.mean[k]),
    );
    let cov = assemble_covariance(&prof.variance)?;
    Ok(EffectEstimate {
        reference: spec.reference,
        pair_order: spec.pairs,
        tau_hat: tau,
        covariance: Some(cov.cov_tau),
        ybar: prof.mean.clone(),
        variant: Variant::Basic,
        se_method: Some(format!("{} plug-in", prof.method.name())),
        m,
        j_within,
        covariance_unreliable: false,
    })
}

fn score_estimate(
    est: &EffectEstimate,
    truth: &DVector<f64>,
    alpha: f64,
) -> Result<EstimatorOutcome> {
    let cov = est
        .covariance
        .as_ref()
        .ok_or(Error::Config("missing covariance".to_string()))?;
    let mut tau = [0.0; PAIRS];
    let mut se = [0.0; PAIRS];
    for q in 0..PAIRS {
        tau[q] = est.tau_hat[q];
        let v = cov[(q, q)];
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Config(format!("bad variance {v}")));
        }
        se[q] = v.sqrt();
    }
    // With Z = 3 the three pairwise effects are linearly dependent
    // (tau_13 = tau_12 + tau_23), so every assembled covariance is rank 2;
    // the pseudo-inverse quadratic form with df = rank is the exact pivot.
    let region_covered = region_covers(est, truth, alpha, SingularPolicy::PseudoInverse)?;
    let intervals = bonferroni_intervals(est, alpha)?;
    let mut interval_covered = [false; PAIRS];
    let mut width = [0.0; PAIRS];
    for (q, iv) in intervals.iter().enumerate() {
        interval_covered[q] = iv.lo <= truth[q] && truth[q] <= iv.hi;
        width[q] = iv.hi - iv.lo;
    }
    Ok(EstimatorOutcome {
        tau,
        se,
        region_covered,
        interval_covered,
        width,
    })
}

fn run_replication(cfg: &SimConfig, rep: usize) -> Result<RepOutcome> {
    let t = 0;
    let data = generate_dataset(cfg, rep)?;
    let ds = &data.dataset;
    let truth = true_estimands(&data, t)?;
    let gps = fit_gps(ds)?;
    let match_seed = cfg.seed.wrapping_add((rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut matches = vector_match(ds, &gps, t, cfg.m, cfg.k_clusters, match_seed)?;
    let within = within_group_match(ds, &gps, cfg.j_within)?;
    matches.adopt_within(&within);
    let regs = fit_group_regressions(ds, false)?;
    // Raw J-match conditional variances: the matched-pair difference also
    // absorbs the mean-function gap between within-group neighbors, which
    // keeps the second variance term conservative where reuse is heaviest.
    let sigma = sigma2_raw(ds, &matches)?;

    let needs_basic = cfg.estimators.iter().any(|e| {
        matches!(e, SimEstimator::BasicNew | SimEstimator::BasicRand)
    });
    let needs_bc = cfg.estimators.iter().any(|e| {
        matches!(e, SimEstimator::BcNew | SimEstimator::BcRand)
    });

    let basic = if needs_basic {
        let imputed = impute_basic(ds, &matches)?;
        let est = estimate_att(ds, &imputed, &matches, t)?;
        Some((imputed, est))
    } else {
        None
    };
    let bc = if needs_bc {
        let imputed = impute_bias_corrected(ds, &matches, &regs)?;
        let est = estimate_att(ds, &imputed, &matches, t)?;
        Some((imputed, est))
    } else {
        None
    };

    let mut per_estimator = Vec::with_capacity(cfg.estimators.len());
    for &kind in &cfg.estimators {
        let est = match kind {
            SimEstimator::BasicNew | SimEstimator::BcNew => {
                let (imputed, est) = match kind {
                    SimEstimator::BasicNew => basic.as_ref().expect("computed"),
                    _ => bc.as_ref().expect("computed"),
                };
                let vy = var_ybar(ds, imputed, &matches, &sigma, t)?;
                let cov = assemble_covariance(&vy)?;
                let mut est = est.clone();
                est.covariance = Some(cov.cov_tau);
                est.se_method = Some("theorem-1".to_string());
                est
            }
            SimEstimator::BasicRand | SimEstimator::BcRand => {
                let (imputed, est) = match kind {
                    SimEstimator::BasicRand => basic.as_ref().expect("computed"),
                    _ => bc.as_ref().expect("computed"),
                };
                let cov = randomization_covariance(ds, imputed, t)?;
                let mut est = est.clone();
                est.covariance = Some(cov);
                est.se_method = Some("randomization".to_string());
                est
            }
            SimEstimator::Ipw => profile_estimate(&ipw_profile(ds, &gps, t, None)?, cfg.m, cfg.j_within)?,
            SimEstimator::Dr => {
                profile_estimate(&dr_profile(ds, &gps, &regs, t, None)?, cfg.m, cfg.j_within)?
            }
        };
        per_estimator.push(score_estimate(&est, &truth, cfg.alpha)?);
    }
    Ok(RepOutcome {
        truth: [truth[0], truth[1], truth[2]],
        per_estimator,
    })
}

/// Aggregated metrics for one estimator within one cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub estimator: SimEstimator,
    pub region_coverage: f64,
    pub interval_coverage: [f64; PAIRS],
    pub mean_interval_coverage: f64,
    /// |mean over replications of (estimate - truth)| per pair.
    pub abs_bias: [f64; PAIRS],
    /// Mean of |estimate - truth| per pair.
    pub mean_abs_error: [f64; PAIRS],
    pub mean_interval_width: [f64; PAIRS],
    /// Mean estimated SE over the empirical SD of the estimation error
    /// (estimate minus per-replication target); absent with fewer than two
    /// replications.
    pub se_ratio: Option<[f64; PAIRS]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub cell_id: String,
    pub config: SimConfig,
    pub completed: usize,
    pub failed: usize,
    pub estimators: Vec<EstimatorReport>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sd(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)).sqrt()
}

pub fn run_cell(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let reps: Vec<Result<RepOutcome>> =
        parallel::map_indexed(cfg.replications, |r| run_replication(cfg, r));
    let mut ok = Vec::new();
    let mut failed = 0;
    let mut first_err = None;
    for r in reps {
        match r {
            Ok(o) => ok.push(o),
            Err(e) => {
                failed += 1;
                first_err.get_or_insert(e);
            }
        }
    }
    // A cell tolerates up to 5% failed replications.
    if failed * 20 > cfg.replications {
        return Err(first_err.unwrap_or(Error::Config("all replications failed".to_string())));
    }
    if ok.is_empty() {
        return Err(Error::Config("no successful replications".to_string()));
    }

    let mut estimators = Vec::with_capacity(cfg.estimators.len());
    for (e_idx, &kind) in cfg.estimators.iter().enumerate() {
        let outs: Vec<&EstimatorOutcome> =
            ok.iter().map(|r| &r.per_estimator[e_idx]).collect();
        let n = outs.len() as f64;
        let region_coverage =
            outs.iter().filter(|o| o.region_covered).count() as f64 / n;
        let mut interval_coverage = [0.0; PAIRS];
        let mut abs_bias = [0.0; PAIRS];
        let mut mean_abs_error = [0.0; PAIRS];
        let mut mean_interval_width = [0.0; PAIRS];
        let mut se_ratio = [0.0; PAIRS];
        for q in 0..PAIRS {
            interval_coverage[q] =
                outs.iter().filter(|o| o.interval_covered[q]).count() as f64 / n;
            let errs: Vec<f64> = ok
                .iter()
                .zip(&outs)
                .map(|(r, o)| o.tau[q] - r.truth[q])
                .collect();
            abs_bias[q] = mean(&errs).abs();
            mean_abs_error[q] = mean(&errs.iter().map(|e| e.abs()).collect::<Vec<_>>());
            mean_interval_width[q] = mean(&outs.iter().map(|o| o.width[q]).collect::<Vec<_>>());
            if outs.len() >= 2 {
                let ses: Vec<f64> = outs.iter().map(|o| o.se[q]).collect();
                // The per-replication target is the sample estimand, which
                // moves with each draw, so calibrate against the spread of
                // the error rather than of the raw point estimates.
                let denom = sd(&errs);
                se_ratio[q] = if denom > 0.0 { mean(&ses) / denom } else { f64::NAN };
            }
        }
        estimators.push(EstimatorReport {
            estimator: kind,
            region_coverage,
            interval_coverage,
            mean_interval_coverage: mean(&interval_coverage),
            abs_bias,
            mean_abs_error,
            mean_interval_width,
            se_ratio: (outs.len() >= 2).then_some(se_ratio),
        });
    }
    Ok(SimReport {
        cell_id: cfg.cell_id(),
        config: cfg.clone(),
        completed: ok.len(),
        failed,
        estimators,
    })
}

/// Quartiles of a per-estimator metric across cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Quantiles {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

pub fn quantiles(values: &[f64]) -> Quantiles {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let at = |q: f64| -> f64 {
        if v.is_empty() {
            return f64::NAN;
        }
        // Linear interpolation between order statistics.
        let h = q * (v.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    Quantiles {
        q25: at(0.25),
        median: at(0.5),
        q75: at(0.75),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: SimEstimator,
    pub region_coverage: Quantiles,
    pub interval_coverage: Quantiles,
    pub abs_bias: Quantiles,
    pub se_ratio: Quantiles,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorialResult {
    pub reports: Vec<SimReport>,
    pub summary: Vec<SummaryRow>,
}

pub fn summarize(reports: &[SimReport]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for kind in SimEstimator::ALL {
        let per_cell: Vec<&EstimatorReport> = reports
            .iter()
            .filter_map(|r| r.estimators.iter().find(|e| e.estimator == kind))
            .collect();
        if per_cell.is_empty() {
            continue;
        }
        let region: Vec<f64> = per_cell.iter().map(|e| e.region_coverage).collect();
        let interval: Vec<f64> = per_cell.iter().map(|e| e.mean_interval_coverage).collect();
        let bias: Vec<f64> = per_cell.iter().map(|e| mean(&e.abs_bias)).collect();
        let ratio: Vec<f64> = per_cell
            .iter()
            .filter_map(|e| e.se_ratio.map(|r| mean(&r)))
            .collect();
        rows.push(SummaryRow {
            estimator: kind,
            region_coverage: quantiles(&region),
            interval_coverage: quantiles(&interval),
            abs_bias: quantiles(&bias),
            se_ratio: quantiles(&ratio),
        });
    }
    rows
}

/// Runs a grid of cells, resuming from `store` when earlier results exist.
/// Each finished cell is written to `store/cell-<id>.json` immediately.
pub fn run_factorial(grid: &[SimConfig], store: Option<&Path>) -> Result<FactorialResult> {
    if grid.is_empty() {
        return Err(Error::Config("empty grid".to_string()));
    }
    let ids: Vec<String> = grid.iter().map(SimConfig::cell_id).collect();
    for (a, id) in ids.iter().enumerate() {
        if ids[..a].contains(id) {
            return Err(Error::Config(format!("duplicate cell {id} in grid")));
        }
    }
    let mut reports = Vec::with_capacity(grid.len());
    for (cfg, id) in grid.iter().zip(&ids) {
        let path = store.map(|d| d.join(format!("cell-{id}.json")));
        if let Some(p) = &path {
            if p.exists() {
                let text = std::fs::read_to_string(p)?;
                let report: SimReport = serde_json::from_str(&text)?;
                if report.config == *cfg {
                    reports.push(report);
                    continue;
                }
            }
        }
        let report = run_cell(cfg)?;
        if let Some(p) = &path {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
        }
        reports.push(report);
    }
    let summary = summarize(&reports);
    Ok(FactorialResult { reports, summary })
}
