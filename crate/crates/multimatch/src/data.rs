//! Observational dataset representation and input validation.
//!
//! Treatment labels are relabeled to contiguous group ids `0..z` in order of
//! first appearance; original labels are kept for reporting. Reported labels
//! are 1-based.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Validated observational dataset: covariates, treatment groups, outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariates: DMatrix<f64>,
    treatments: Vec<usize>,
    outcomes: Vec<f64>,
    labels: Vec<String>,
    covariate_names: Vec<String>,
    group_members: Vec<Vec<usize>>,
}

/// One raw input row before validation.
#[derive(Debug, Clone)]
pub struct RawRow {
    pub covariates: Vec<f64>,
    pub treatment: String,
    pub outcome: f64,
}

impl Dataset {
    /// Validates raw rows into a [`Dataset`], relabeling treatments to
    /// contiguous group ids in first-appearance order.
    pub fn validate(covariate_names: Vec<String>, rows: &[RawRow]) -> Result<Self> {
        let p = covariate_names.len();
        let mut labels: Vec<String> = Vec::new();
        let mut treatments = Vec::with_capacity(rows.len());
        let mut outcomes = Vec::with_capacity(rows.len());
        let mut covariates = DMatrix::zeros(rows.len(), p);
        for (row_idx, row) in rows.iter().enumerate() {
            if row.covariates.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: row.covariates.len(),
                });
            }
            for (c, &v) in row.covariates.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        row: row_idx,
                        column: covariate_names[c].clone(),
                    });
                }
                covariates[(row_idx, c)] = v;
            }
            if !row.outcome.is_finite() {
                return Err(Error::NonFinite {
                    row: row_idx,
                    column: "outcome".to_string(),
                });
            }
            outcomes.push(row.outcome);
            let group = match labels.iter().position(|l| *l == row.treatment) {
                Some(g) => g,
                None => {
                    labels.push(row.treatment.clone());
                    labels.len() - 1
                }
            };
            treatments.push(group);
        }
        if labels.len() < 2 {
            return Err(Error::TooFewTreatments);
        }
        let mut group_members = vec![Vec::new(); labels.len()];
        for (i, &w) in treatments.iter().enumerate() {
            group_members[w].push(i);
        }
        for (w, members) in group_members.iter().enumerate() {
            if members.len() < 2 {
                return Err(Error::GroupTooSmall {
                    label: labels[w].clone(),
                    size: members.len(),
                    required: 2,
                });
            }
        }
        Ok(Dataset {
            covariates,
            treatments,
            outcomes,
            labels,
            covariate_names,
            group_members,
        })
    }

    /// Builds a dataset from already-contiguous group ids. Intended for the
    /// simulation harness; goes through the same validation path.
    pub fn from_parts(
        covariates: DMatrix<f64>,
        treatments: &[usize],
        outcomes: &[f64],
    ) -> Result<Self> {
        let names = (0..covariates.ncols())
            .map(|c| format!("x{}", c + 1))
            .collect();
        let rows: Vec<RawRow> = (0..covariates.nrows())
            .map(|i| RawRow {
                covariates: covariates.row(i).iter().copied().collect(),
                treatment: format!("{}", treatments[i] + 1),
                outcome: outcomes[i],
            })
            .collect();
        Dataset::validate(names, &rows)
    }

    pub fn n(&self) -> usize {
        self.treatments.len()
    }

    /// Number of covariates.
    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    /// Number of treatment groups.
    pub fn z(&self) -> usize {
        self.labels.len()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Group id of unit `i`, in `0..z`.
    pub fn group_of(&self, i: usize) -> usize {
        self.treatments[i]
    }

    pub fn outcome(&self, i: usize) -> f64 {
        self.outcomes[i]
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// Units belonging to group `w`, in ascending index order.
    pub fn group(&self, w: usize) -> &[usize] {
        &self.group_members[w]
    }

    pub fn group_size(&self, w: usize) -> usize {
        self.group_members[w].len()
    }

    /// Original label of group `w`.
    pub fn label(&self, w: usize) -> &str {
        &self.labels[w]
    }

    /// Checks every group can supply `m` matches plus the unit itself.
    pub fn check_group_sizes(&self, m: usize) -> Result<()> {
        for w in 0..self.z() {
            if self.group_size(w) < m + 1 {
                return Err(Error::GroupTooSmall {
                    label: self.labels[w].clone(),
                    size: self.group_size(w),
                    required: m + 1,
                });
            }
        }
        Ok(())
    }

    /// Splits the dataset on a discrete covariate column, one dataset per
    /// distinct value. More than `10` distinct values is an error.
    pub fn subsample_by_discrete(&self, column: usize) -> Result<Vec<Dataset>> {
        const MAX_LEVELS: usize = 10;
        if column >= self.p() {
            return Err(Error::ColumnOutOfRange(column, self.p()));
        }
        let mut by_value: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for i in 0..self.n() {
            // Bit pattern as key: values compared exactly, no tolerance.
            by_value
                .entry(self.covariates[(i, column)].to_bits())
                .or_default()
                .push(i);
            if by_value.len() > MAX_LEVELS {
                return Err(Error::TooManyLevels(column, MAX_LEVELS));
            }
        }
        by_value
            .values()
            .map(|members| {
                let rows: Vec<RawRow> = members
                    .iter()
                    .map(|&i| RawRow {
                        covariates: self.covariates.row(i).iter().copied().collect(),
                        treatment: self.labels[self.treatments[i]].clone(),
                        outcome: self.outcomes[i],
                    })
                    .collect();
                Dataset::validate(self.covariate_names.clone(), &rows)
            })
            .collect()
    }
}

/// Which estimand a run targets and which treatment pairs it reports.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimandSpec {
    pub reference: Reference,
    /// Ordered `(j, k)` pairs with `j < k`, as group ids.
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    /// ATT with reference group `t` (group id).
    Treated(usize),
    /// Overall ATE, aggregated over all reference groups.
    All,
}

/// All `z(z-1)/2` pairs `(j, k)` with `j < k`, lexicographic.
pub fn lexicographic_pairs(z: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for j in 0..z {
        for k in (j + 1)..z {
            pairs.push((j, k));
        }
    }
    pairs
}

impl EstimandSpec {
    /// All `z(z-1)/2` pairs in lexicographic order.
    pub fn all_pairs(reference: Reference, z: usize) -> Self {
        EstimandSpec {
            reference,
            pairs: lexicographic_pairs(z),
        }
    }
}
