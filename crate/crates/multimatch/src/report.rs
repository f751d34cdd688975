//! Summary-table rendering for a collection of cell reports: a median/IQR
//! coverage table, coverage stratified by design factors, and a
//! bias/width/SE-ratio table, each as CSV plus aligned text.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::sim::{quantiles, summarize, CovariateDist, EstimatorReport, SimEstimator, SimReport};

/// One rendered table.
#[derive(Debug, Clone)]
pub struct Table {
    pub title: String,
    pub csv: String,
    pub text: String,
}

fn fmt2(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else {
        "-".to_string()
    }
}

fn render(title: &str, header: &[String], rows: &[Vec<String>]) -> Table {
    let mut csv = String::new();
    csv.push_str(&header.join(","));
    csv.push('\n');
    for row in rows {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut text = format!("{title}\n");
    text.push_str(&line(header));
    text.push('\n');
    text.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    text.push('\n');
    for row in rows {
        text.push_str(&line(row));
        text.push('\n');
    }
    Table {
        title: title.to_string(),
        csv,
        text,
    }
}

fn estimators_present(reports: &[SimReport]) -> Vec<SimEstimator> {
    SimEstimator::ALL
        .into_iter()
        .filter(|k| {
            reports
                .iter()
                .any(|r| r.estimators.iter().any(|e| e.estimator == *k))
        })
        .collect()
}

fn check_nonempty(reports: &[SimReport]) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Config("results store is empty".to_string()));
    }
    Ok(())
}

fn mean3(v: &[f64; 3]) -> f64 {
    (v[0] + v[1] + v[2]) / 3.0
}

fn median_metric<F>(cells: &[&EstimatorReport], f: F) -> f64
where
    F: Fn(&EstimatorReport) -> f64,
{
    quantiles(&cells.iter().map(|e| f(e)).collect::<Vec<_>>()).median
}

fn grouped_table<K, F, M>(
    reports: &[SimReport],
    title: &str,
    key_names: &[&str],
    key_of: F,
    metric: M,
) -> Result<Table>
where
    K: Ord + Clone,
    F: Fn(&SimReport) -> (K, Vec<String>),
    M: Fn(&EstimatorReport) -> f64,
{
    check_nonempty(reports)?;
    let kinds = estimators_present(reports);
    let mut groups: BTreeMap<K, (Vec<String>, Vec<&SimReport>)> = BTreeMap::new();
    for r in reports {
        let (key, label) = key_of(r);
        groups.entry(key).or_insert((label, Vec::new())).1.push(r);
    }
    let mut header: Vec<String> = key_names.iter().map(|s| s.to_string()).collect();
    header.extend(kinds.iter().map(|k| k.name().to_string()));
    let mut rows = Vec::new();
    for (label, members) in groups.values() {
        let mut row = label.clone();
        for kind in &kinds {
            let cells: Vec<&EstimatorReport> = members
                .iter()
                .filter_map(|r| r.estimators.iter().find(|e| e.estimator == *kind))
                .collect();
            row.push(if cells.is_empty() {
                "-".to_string()
            } else {
                fmt2(median_metric(&cells, &metric))
            });
        }
        rows.push(row);
    }
    Ok(render(title, &header, &rows))
}

/// Median and quartiles of region and interval coverage per estimator.
pub fn table1(reports: &[SimReport]) -> Result<Table> {
    check_nonempty(reports)?;
    let header: Vec<String> = [
        "estimator",
        "region_q25",
        "region_median",
        "region_q75",
        "interval_q25",
        "interval_median",
        "interval_q75",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = summarize(reports)
        .iter()
        .map(|row| {
            vec![
                row.estimator.name().to_string(),
                fmt2(row.region_coverage.q25),
                fmt2(row.region_coverage.median),
                fmt2(row.region_coverage.q75),
                fmt2(row.interval_coverage.q25),
                fmt2(row.interval_coverage.median),
                fmt2(row.interval_coverage.q75),
            ]
        })
        .collect();
    Ok(render(
        "Coverage across cells (median, quartiles)",
        &header,
        &rows,
    ))
}

/// Median region coverage stratified by (gamma, b, P).
pub fn table2(reports: &[SimReport]) -> Result<Table> {
    grouped_table(
        reports,
        "Region coverage by gamma, b, P (medians)",
        &["gamma", "b", "P"],
        |r| {
            let c = &r.config;
            (
                (c.gamma, c.b.to_bits(), c.p),
                vec![c.gamma.to_string(), format!("{:.2}", c.b), c.p.to_string()],
            )
        },
        |e| e.region_coverage,
    )
}

/// Median interval coverage stratified by (f, b).
pub fn table3(reports: &[SimReport]) -> Result<Table> {
    grouped_table(
        reports,
        "Interval coverage by covariate distribution and b (medians)",
        &["f", "b"],
        |r| {
            let c = &r.config;
            let f = match c.f {
                CovariateDist::Normal => "normal",
                CovariateDist::T7 => "t7",
            };
            (
                (f, c.b.to_bits()),
                vec![f.to_string(), format!("{:.2}", c.b)],
            )
        },
        |e| e.mean_interval_coverage,
    )
}

/// Median |bias|, interval width, and SE ratio stratified by b.
pub fn table4(reports: &[SimReport]) -> Result<Table> {
    check_nonempty(reports)?;
    let kinds = estimators_present(reports);
    let mut groups: BTreeMap<u64, (String, Vec<&SimReport>)> = BTreeMap::new();
    for r in reports {
        groups
            .entry(r.config.b.to_bits())
            .or_insert((format!("{:.2}", r.config.b), Vec::new()))
            .1
            .push(r);
    }
    let mut header = vec!["metric".to_string(), "b".to_string()];
    header.extend(kinds.iter().map(|k| k.name().to_string()));
    let mut rows = Vec::new();
    type Metric = (&'static str, fn(&EstimatorReport) -> f64);
    let metrics: [Metric; 3] = [
        ("abs_bias", |e| mean3(&e.abs_bias)),
        ("width", |e| mean3(&e.mean_interval_width)),
        ("se_ratio", |e| {
            e.se_ratio.map(|r| mean3(&r)).unwrap_or(f64::NAN)
        }),
    ];
    for (name, metric) in metrics {
        for (label, members) in groups.values() {
            let mut row = vec![name.to_string(), label.clone()];
            for kind in &kinds {
                let cells: Vec<&EstimatorReport> = members
                    .iter()
                    .filter_map(|r| r.estimators.iter().find(|e| e.estimator == *kind))
                    .collect();
                row.push(if cells.is_empty() {
                    "-".to_string()
                } else {
                    fmt2(median_metric(&cells, metric))
                });
            }
            rows.push(row);
        }
    }
    Ok(render(
        "Bias, interval width, and SE ratio by b (medians)",
        &header,
        &rows,
    ))
}

pub fn all_tables(reports: &[SimReport]) -> Result<Vec<Table>> {
    Ok(vec![
        table1(reports)?,
        table2(reports)?,
        table3(reports)?,
        table4(reports)?,
    ])
}
