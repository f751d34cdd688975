//! Real-data analysis pipeline: CSV in, estimate/inference/overlap JSON and
//! a text summary out. Field order in the JSON structs is fixed; floats
//! serialize shortest-round-trip.

use std::path::Path;

use serde::Serialize;

use crate::data::{Dataset, RawRow};
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_ate, estimate_att, fit_group_regressions, impute_basic, impute_bias_corrected,
    EffectEstimate, Variant,
};
use crate::gps::{fit_gps, overlap_report, GpsModel};
use crate::inference::{global_test, SingularPolicy};
use crate::matching::{vector_match, within_group_match};
use crate::variance::{assemble_covariance, randomization_covariance, sigma2_raw, sigma2_residual, var_ybar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeMethod {
    /// The matching-consistent large-sample covariance.
    Theorem1,
    /// Sample covariance of imputed per-unit differences.
    Randomization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaChoice {
    Raw,
    Residual,
}

#[derive(Debug, Clone)]
pub enum ReferenceChoice {
    Label(String),
    All,
}

#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    pub reference: ReferenceChoice,
    pub variant: Variant,
    pub se: SeMethod,
    pub sigma: SigmaChoice,
    pub m: usize,
    pub j_within: usize,
    pub k_clusters: usize,
    pub alpha: f64,
    pub eta: f64,
    pub seed: u64,
    pub interactions: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            reference: ReferenceChoice::All,
            variant: Variant::BiasCorrected,
            se: SeMethod::Theorem1,
            sigma: SigmaChoice::Residual,
            m: 1,
            j_within: 1,
            k_clusters: 5,
            alpha: 0.05,
            eta: 0.01,
            seed: 17,
            interactions: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PairJson {
    pub groups: (String, String),
    pub tau: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReferenceEstimateJson {
    pub reference: String,
    pub n_reference: usize,
    pub pairs: Vec<PairJson>,
    pub ybar: Vec<f64>,
    pub estimator: String,
    pub se_method: String,
    pub m: usize,
    pub j: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OverallEstimateJson {
    pub pairs: Vec<PairJson>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateJson {
    pub groups: Vec<String>,
    pub group_sizes: Vec<usize>,
    pub references: Vec<ReferenceEstimateJson>,
    /// Sample-share-weighted overall pairwise effects; present for
    /// reference = all. Point estimates only; `se` is NaN there.
    pub overall: Option<OverallEstimateJson>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReferenceInferenceJson {
    pub reference: String,
    pub global: crate::inference::InferenceReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferenceJson {
    pub alpha: f64,
    pub references: Vec<ReferenceInferenceJson>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OverlapJson {
    pub eta: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_max_norm: f64,
    pub log_likelihood: f64,
    pub score_range: Vec<(f64, f64)>,
    pub flagged_units: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AnalysisOutput {
    pub estimate: EstimateJson,
    pub inference: InferenceJson,
    pub overlap: OverlapJson,
    pub summary: String,
}

/// Loads a CSV with a header row, pulling the named treatment, outcome, and
/// covariate columns.
pub fn load_csv(
    path: &Path,
    treatment: &str,
    outcome: &str,
    covariates: Option<&[String]>,
) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column {name:?} not found in {path:?}")))
    };
    let t_col = col(treatment)?;
    let y_col = col(outcome)?;
    let cov_names: Vec<String> = match covariates {
        Some(list) => {
            for name in list {
                col(name)?;
            }
            list.to_vec()
        }
        None => headers
            .iter()
            .filter(|h| h.as_str() != treatment && h.as_str() != outcome)
            .cloned()
            .collect(),
    };
    let cov_cols: Vec<usize> = cov_names.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |c: usize, name: &str| -> Result<f64> {
            record
                .get(c)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| {
                    Error::Config(format!(
                        "row {}: column {name:?} is not numeric ({:?})",
                        r + 2,
                        record.get(c).unwrap_or("")
                    ))
                })
        };
        let covariates = cov_cols
            .iter()
            .zip(&cov_names)
            .map(|(&c, n)| parse(c, n))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(RawRow {
            covariates,
            treatment: record.get(t_col).unwrap_or("").trim().to_string(),
            outcome: parse(y_col, outcome)?,
        });
    }
    Dataset::validate(cov_names, &rows)
}

fn format_pair(ds: &Dataset, pair: (usize, usize)) -> (String, String) {
    (ds.label(pair.0).to_string(), ds.label(pair.1).to_string())
}

struct ReferenceRun {
    estimate: EffectEstimate,
    json: ReferenceEstimateJson,
    inference: ReferenceInferenceJson,
}

fn run_reference(
    ds: &Dataset,
    gps: &GpsModel,
    t: usize,
    opts: &AnalysisOptions,
) -> Result<ReferenceRun> {
    let mut matches = vector_match(ds, gps, t, opts.m, opts.k_clusters, opts.seed)?;
    let within = within_group_match(ds, gps, opts.j_within)?;
    matches.adopt_within(&within);
    let needs_regs =
        opts.variant == Variant::BiasCorrected || opts.sigma == SigmaChoice::Residual;
    let regs = if needs_regs {
        Some(fit_group_regressions(ds, opts.interactions)?)
    } else {
        None
    };
    let imputed = match opts.variant {
        Variant::Basic => impute_basic(ds, &matches)?,
        Variant::BiasCorrected => {
            impute_bias_corrected(ds, &matches, regs.as_ref().expect("fitted"))?
        }
    };
    let mut est = estimate_att(ds, &imputed, &matches, t)?;
    let se_name = match opts.se {
        SeMethod::Theorem1 => {
            let sigma = match opts.sigma {
                SigmaChoice::Raw => sigma2_raw(ds, &matches)?,
                SigmaChoice::Residual => {
                    sigma2_residual(ds, &matches, regs.as_ref().expect("fitted"))?
                }
            };
            let vy = var_ybar(ds, &imputed, &matches, &sigma, t)?;
            est.covariance = Some(assemble_covariance(&vy)?.cov_tau);
            "theorem-1"
        }
        SeMethod::Randomization => {
            est.covariance = Some(randomization_covariance(ds, &imputed, t)?);
            "randomization"
        }
    };
    est.se_method = Some(se_name.to_string());

    let cov = est.covariance.as_ref().expect("just set");
    let pairs: Vec<PairJson> = est
        .pair_order
        .iter()
        .enumerate()
        .map(|(q, &pair)| PairJson {
            groups: format_pair(ds, pair),
            tau: est.tau_hat[q],
            se: cov[(q, q)].max(0.0).sqrt(),
        })
        .collect();
    let json = ReferenceEstimateJson {
        reference: ds.label(t).to_string(),
        n_reference: ds.group_size(t),
        pairs,
        ybar: est.ybar.clone(),
        estimator: est.variant.name().to_string(),
        se_method: se_name.to_string(),
        m: opts.m,
        j: opts.j_within,
    };
    // Pairwise effects over Z groups are linearly dependent, so the
    // covariance is structurally rank Z-1; the pseudo-inverse form with
    // reduced df is the meaningful test.
    let null = nalgebra::DVector::zeros(est.tau_hat.len());
    let global = global_test(&est, &null, opts.alpha, SingularPolicy::PseudoInverse)?;
    Ok(ReferenceRun {
        json,
        inference: ReferenceInferenceJson {
            reference: ds.label(t).to_string(),
            global,
        },
        estimate: est,
    })
}

pub fn analyze(ds: &Dataset, opts: &AnalysisOptions) -> Result<AnalysisOutput> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::InvalidAlpha(opts.alpha));
    }
    let gps = fit_gps(ds)?;
    let ov = overlap_report(&gps, opts.eta)?;
    let overlap = OverlapJson {
        eta: ov.eta,
        converged: gps.converged,
        iterations: gps.iterations,
        gradient_max_norm: gps.gradient_max_norm,
        log_likelihood: gps.log_likelihood,
        score_range: ov.score_range,
        flagged_units: ov.flagged_units,
    };

    let refs: Vec<usize> = match &opts.reference {
        ReferenceChoice::All => (0..ds.z()).collect(),
        ReferenceChoice::Label(label) => {
            let t = (0..ds.z())
                .find(|&w| ds.label(w) == label)
                .ok_or_else(|| {
                    Error::Config(format!("reference {label:?} is not a treatment label"))
                })?;
            vec![t]
        }
    };
    let mut runs = Vec::with_capacity(refs.len());
    for &t in &refs {
        runs.push(run_reference(ds, &gps, t, opts)?);
    }
    let overall = if matches!(opts.reference, ReferenceChoice::All) {
        let per_ref: Vec<EffectEstimate> = runs.iter().map(|r| r.estimate.clone()).collect();
        let ate = estimate_ate(ds, &per_ref)?;
        Some(OverallEstimateJson {
            pairs: ate
                .pair_order
                .iter()
                .enumerate()
                .map(|(q, &pair)| PairJson {
                    groups: format_pair(ds, pair),
                    tau: ate.tau_hat[q],
                    se: f64::NAN,
                })
                .collect(),
        })
    } else {
        None
    };

    let estimate = EstimateJson {
        groups: (0..ds.z()).map(|w| ds.label(w).to_string()).collect(),
        group_sizes: (0..ds.z()).map(|w| ds.group_size(w)).collect(),
        references: runs.iter().map(|r| r.json.clone()).collect(),
        overall,
    };
    let inference = InferenceJson {
        alpha: opts.alpha,
        references: runs.iter().map(|r| r.inference.clone()).collect(),
    };
    let summary = render_summary(ds, &estimate, &inference, &overlap);
    Ok(AnalysisOutput {
        estimate,
        inference,
        overlap,
        summary,
    })
}

fn render_summary(
    ds: &Dataset,
    estimate: &EstimateJson,
    inference: &InferenceJson,
    overlap: &OverlapJson,
) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "units: {}   treatments: {}", ds.n(), ds.z());
    for (label, size) in estimate.groups.iter().zip(&estimate.group_sizes) {
        let _ = writeln!(s, "  group {label}: {size} units");
    }
    let _ = writeln!(
        s,
        "propensity model: converged={} iterations={} |grad|={:.2e}",
        overlap.converged, overlap.iterations, overlap.gradient_max_norm
    );
    if !overlap.flagged_units.is_empty() {
        let _ = writeln!(
            s,
            "overlap: {} unit(s) with extreme scores (eta={})",
            overlap.flagged_units.len(),
            overlap.eta
        );
    }
    for (r, inf) in estimate.references.iter().zip(&inference.references) {
        let _ = writeln!(
            s,
            "\nreference group {} ({}, {} SE, m={}, J={}):",
            r.reference, r.estimator, r.se_method, r.m, r.j
        );
        for (pair, iv) in r.pairs.iter().zip(&inf.global.pair_intervals) {
            let _ = writeln!(
                s,
                "  tau[{} vs {}] = {:+.4}  se {:.4}  ci [{:+.4}, {:+.4}]",
                pair.groups.0, pair.groups.1, pair.tau, pair.se, iv.lo, iv.hi
            );
        }
        let _ = writeln!(
            s,
            "  global test: z2 = {:.4}, df = {}, p = {:.4}",
            inf.global.z2, inf.global.effective_df, inf.global.p_value
        );
    }
    if let Some(overall) = &estimate.overall {
        let _ = writeln!(s, "\noverall (sample-share weighted, point estimates):");
        for pair in &overall.pairs {
            let _ = writeln!(
                s,
                "  tau[{} vs {}] = {:+.4}",
                pair.groups.0, pair.groups.1, pair.tau
            );
        }
    }
    s
}
