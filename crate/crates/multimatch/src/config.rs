//! Grid configuration files: flat `key = value` lines under `[section]`
//! headers, `#` comments. Every section expands to the cross product of its
//! comma-separated values; sections concatenate into one grid.
//!
//! ```text
//! [grid]
//! f = normal, t7
//! p = 3, 6
//! b = 0, 0.5, 1
//! n1 = 300
//! replications = 200
//! estimators = B-N, BC-N
//! ```

use crate::error::{Error, Result};
use crate::sim::{CovariateDist, ResponseSurface, SimConfig, SimEstimator};

fn bad(line_no: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("grid config line {line_no}: {msg}"))
}

fn parse_f(v: &str, line_no: usize) -> Result<CovariateDist> {
    match v {
        "normal" | "n" => Ok(CovariateDist::Normal),
        "t7" | "t" => Ok(CovariateDist::T7),
        other => Err(bad(line_no, format!("unknown covariate distribution {other:?}"))),
    }
}

fn parse_g(v: &str, line_no: usize) -> Result<ResponseSurface> {
    match v {
        "identity" | "x" => Ok(ResponseSurface::Identity),
        "exp" => Ok(ResponseSurface::Exp),
        other => Err(bad(line_no, format!("unknown response surface {other:?}"))),
    }
}

fn parse_estimator(v: &str, line_no: usize) -> Result<SimEstimator> {
    SimEstimator::ALL
        .into_iter()
        .find(|e| e.name().eq_ignore_ascii_case(v))
        .ok_or_else(|| bad(line_no, format!("unknown estimator {v:?}")))
}

fn parse_num<T: std::str::FromStr>(v: &str, key: &str, line_no: usize) -> Result<T> {
    v.parse()
        .map_err(|_| bad(line_no, format!("invalid value {v:?} for {key}")))
}

#[derive(Debug, Clone)]
struct Section {
    entries: Vec<(String, Vec<String>, usize)>,
}

fn split_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(bad(line_no, "unterminated section header"));
            }
            sections.push(Section { entries: Vec::new() });
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(line_no, "expected key = value"))?;
        let values: Vec<String> = value
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(bad(line_no, format!("no values for key {:?}", key.trim())));
        }
        let section = sections
            .last_mut()
            .ok_or_else(|| bad(line_no, "key before any [section] header"))?;
        section
            .entries
            .push((key.trim().to_ascii_lowercase(), values, line_no));
    }
    Ok(sections)
}

fn apply(cfg: &mut SimConfig, key: &str, value: &str, line_no: usize) -> Result<()> {
    match key {
        "f" => cfg.f = parse_f(value, line_no)?,
        "g" => cfg.g = parse_g(value, line_no)?,
        "p" => cfg.p = parse_num(value, key, line_no)?,
        "b" => cfg.b = parse_num(value, key, line_no)?,
        "gamma" => cfg.gamma = parse_num(value, key, line_no)?,
        "n1" => cfg.n1 = parse_num(value, key, line_no)?,
        "sigma2sq" => cfg.sigma2sq = parse_num(value, key, line_no)?,
        "sigma3sq" => cfg.sigma3sq = parse_num(value, key, line_no)?,
        "lambda" => cfg.lambda = parse_num(value, key, line_no)?,
        "theta" => cfg.theta = parse_num(value, key, line_no)?,
        "replications" => cfg.replications = parse_num(value, key, line_no)?,
        "seed" => cfg.seed = parse_num(value, key, line_no)?,
        "m" => cfg.m = parse_num(value, key, line_no)?,
        "j" => cfg.j_within = parse_num(value, key, line_no)?,
        "k" => cfg.k_clusters = parse_num(value, key, line_no)?,
        "alpha" => cfg.alpha = parse_num(value, key, line_no)?,
        "standardize_t" => cfg.standardize_t = parse_num(value, key, line_no)?,
        other => return Err(bad(line_no, format!("unknown key {other:?}"))),
    }
    Ok(())
}

/// Parses a grid file into the flattened list of cells.
pub fn parse_grid(text: &str) -> Result<Vec<SimConfig>> {
    let sections = split_sections(text)?;
    if sections.is_empty() {
        return Err(Error::Config("grid config has no sections".to_string()));
    }
    let mut grid = Vec::new();
    for section in sections {
        // `estimators` applies to every cell of the section, the rest fan out.
        let mut estimators: Option<Vec<SimEstimator>> = None;
        let mut fanout: Vec<(String, Vec<String>, usize)> = Vec::new();
        for (key, values, line_no) in section.entries {
            if key == "estimators" {
                let parsed: Result<Vec<SimEstimator>> = values
                    .iter()
                    .map(|v| parse_estimator(v, line_no))
                    .collect();
                estimators = Some(parsed?);
            } else {
                fanout.push((key, values, line_no));
            }
        }
        let mut cells = vec![SimConfig::baseline()];
        for (key, values, line_no) in &fanout {
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for cell in &cells {
                for value in values {
                    let mut cfg = cell.clone();
                    apply(&mut cfg, key, value, *line_no)?;
                    next.push(cfg);
                }
            }
            cells = next;
        }
        if let Some(ests) = estimators {
            for cell in &mut cells {
                cell.estimators = ests.clone();
            }
        }
        for cell in &cells {
            cell.validate()?;
        }
        grid.extend(cells);
    }
    Ok(grid)
}
