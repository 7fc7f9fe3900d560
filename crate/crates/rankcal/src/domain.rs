//! Core data model: trial data, design parameters, and structural validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aligned per-unit columns of a randomized trial: treatment labels in
/// `1..=num_treatments`, real outcomes, a fixed-dimension covariate vector,
/// and optional discrete stratum labels.
///
/// Immutable after construction; all structural invariants are checked in
/// [`TrialData::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    treatments: Vec<usize>,
    outcomes: Vec<f64>,
    covariates: Vec<f64>, // row-major, n x p
    p: usize,
    strata: Option<Vec<usize>>,
    num_treatments: usize,
}

impl TrialData {
    pub fn new(
        treatments: Vec<usize>,
        outcomes: Vec<f64>,
        covariate_rows: Vec<Vec<f64>>,
        strata: Option<Vec<usize>>,
        num_treatments: usize,
    ) -> Result<Self> {
        let n = treatments.len();
        if num_treatments < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 treatments, got {num_treatments}"
            )));
        }
        if outcomes.len() != n {
            return Err(Error::LengthMismatch {
                column: "outcomes",
                expected: n,
                got: outcomes.len(),
            });
        }
        if covariate_rows.len() != n {
            return Err(Error::LengthMismatch {
                column: "covariates",
                expected: n,
                got: covariate_rows.len(),
            });
        }
        if let Some(s) = &strata {
            if s.len() != n {
                return Err(Error::LengthMismatch {
                    column: "strata",
                    expected: n,
                    got: s.len(),
                });
            }
        }
        let p = covariate_rows.first().map_or(0, |r| r.len());
        if p == 0 {
            return Err(Error::InvalidInput(
                "covariate dimension must be at least 1".into(),
            ));
        }
        for (i, &label) in treatments.iter().enumerate() {
            if label < 1 || label > num_treatments {
                let _ = i;
                return Err(Error::LabelOutOfRange {
                    label,
                    num_treatments,
                });
            }
        }
        for (i, &y) in outcomes.iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::NonFinite {
                    column: "outcomes",
                    row: i,
                });
            }
        }
        let mut covariates = Vec::with_capacity(n * p);
        for (i, row) in covariate_rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::InvalidInput(format!(
                    "covariate row {i} has dimension {}, expected {p}",
                    row.len()
                )));
            }
            for &x in row {
                if !x.is_finite() {
                    return Err(Error::NonFinite {
                        column: "covariates",
                        row: i,
                    });
                }
            }
            covariates.extend_from_slice(row);
        }
        Ok(Self {
            treatments,
            outcomes,
            covariates,
            p,
            strata,
            num_treatments,
        })
    }

    pub fn n(&self) -> usize {
        self.treatments.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn num_treatments(&self) -> usize {
        self.num_treatments
    }

    pub fn treatments(&self) -> &[usize] {
        &self.treatments
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn strata(&self) -> Option<&[usize]> {
        self.strata.as_deref()
    }

    pub fn covariate_row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.p..(i + 1) * self.p]
    }

    /// Unit indices assigned to `arm`.
    pub fn group_indices(&self, arm: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.treatments[i] == arm).collect()
    }

    pub fn group_size(&self, arm: usize) -> usize {
        self.treatments.iter().filter(|&&a| a == arm).count()
    }

    pub fn group_outcomes(&self, arm: usize) -> Vec<f64> {
        self.group_indices(arm)
            .into_iter()
            .map(|i| self.outcomes[i])
            .collect()
    }
}

/// Design knowledge: target allocation proportions and the ordered treatment
/// pair under comparison. Proportions are design constants, never estimated
/// here (see [`crate::inference::PiSource`] for the explicit opt-in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub pi: Vec<f64>,
    pub pair: (usize, usize),
}

impl DesignSpec {
    pub fn new(pi: Vec<f64>, pair: (usize, usize)) -> Result<Self> {
        let num_treatments = pi.len();
        if num_treatments < 2 {
            return Err(Error::InvalidDesign(format!(
                "need at least 2 allocation proportions, got {num_treatments}"
            )));
        }
        if pi.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidDesign(
                "all allocation proportions must be positive".into(),
            ));
        }
        let sum: f64 = pi.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDesign(format!(
                "allocation proportions sum to {sum}, expected 1"
            )));
        }
        let (j, k) = pair;
        if j == k {
            return Err(Error::InvalidDesign("pair must name two distinct arms".into()));
        }
        for arm in [j, k] {
            if arm < 1 || arm > num_treatments {
                return Err(Error::InvalidDesign(format!(
                    "arm {arm} out of range 1..={num_treatments}"
                )));
            }
        }
        Ok(Self { pi, pair })
    }

    pub fn num_treatments(&self) -> usize {
        self.pi.len()
    }

    pub fn pi_pair(&self) -> (f64, f64) {
        (self.pi[self.pair.0 - 1], self.pi[self.pair.1 - 1])
    }
}

/// Point estimate with its normal-theory interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub point: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub method: Method,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    UnadjustedU,
    AdjustedU,
    RestrictedAdjustedU,
    MeanDifference,
}

/// Non-fatal diagnostics raised by [`validate_trial`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ValidationFlag {
    /// Tied outcome values: the indicator I(a <= b) is asymmetric under ties.
    OutcomeTies { tied_pairs: usize },
    /// Strata were used but are not a function of the adjustment covariates.
    StrataNotInCovariates,
    /// Group too small for any variance estimate.
    TinyGroup { arm: usize, size: usize },
    /// Asymptotics are unreliable below roughly 20 units per group.
    SmallGroup { arm: usize, size: usize },
    /// Covariate dimension large relative to the smaller group.
    HighDimensionalCovariates { p: usize, min_group: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub group_sizes: Vec<usize>,
    pub tie_count: usize,
    /// (min, max) eigenvalue of the covariate sample covariance, when n >= 2.
    pub covariate_eigen: Option<(f64, f64)>,
    pub flags: Vec<ValidationFlag>,
}

impl ValidationSummary {
    pub fn has_flags(&self) -> bool {
        !self.flags.is_empty()
    }
}

/// Count of tied outcome pairs: for each run of m equal values, m(m-1)/2.
fn tied_pairs(outcomes: &[f64]) -> usize {
    let mut sorted: Vec<f64> = outcomes.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut count = 0;
    let mut run = 1usize;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            count += run * (run - 1) / 2;
            run = 1;
        }
    }
    count + run * (run - 1) / 2
}

/// True when identical covariate rows always carry the same stratum label,
/// i.e. the stratum is representable as a function of the covariates.
fn strata_determined_by_covariates(data: &TrialData, strata: &[usize]) -> bool {
    use std::collections::HashMap;
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    for i in 0..data.n() {
        let key: Vec<u64> = data.covariate_row(i).iter().map(|x| x.to_bits()).collect();
        match seen.get(&key) {
            Some(&z) if z != strata[i] => return false,
            Some(_) => {}
            None => {
                seen.insert(key, strata[i]);
            }
        }
    }
    true
}

/// Structural validation of a dataset/design pair.
///
/// Hard errors cover invariant violations (design/data mismatch, empty group
/// in the compared pair); everything the downstream estimators can survive
/// is reported as a flag instead.
pub fn validate_trial(data: &TrialData, design: &DesignSpec) -> Result<ValidationSummary> {
    if design.num_treatments() != data.num_treatments() {
        return Err(Error::InvalidDesign(format!(
            "design has {} arms but data has {}",
            design.num_treatments(),
            data.num_treatments()
        )));
    }
    let group_sizes: Vec<usize> = (1..=data.num_treatments())
        .map(|arm| data.group_size(arm))
        .collect();
    let (j, k) = design.pair;
    for arm in [j, k] {
        if group_sizes[arm - 1] == 0 {
            return Err(Error::EmptyGroup { arm });
        }
    }

    let mut flags = Vec::new();
    let tie_count = tied_pairs(data.outcomes());
    if tie_count > 0 {
        flags.push(ValidationFlag::OutcomeTies {
            tied_pairs: tie_count,
        });
    }
    if let Some(strata) = data.strata() {
        if !strata_determined_by_covariates(data, strata) {
            flags.push(ValidationFlag::StrataNotInCovariates);
        }
    }
    for (idx, &size) in group_sizes.iter().enumerate() {
        let arm = idx + 1;
        if size < 2 {
            flags.push(ValidationFlag::TinyGroup { arm, size });
        } else if size < 20 {
            flags.push(ValidationFlag::SmallGroup { arm, size });
        }
    }
    let min_group = group_sizes[j - 1].min(group_sizes[k - 1]);
    if data.p() * 10 > min_group {
        flags.push(ValidationFlag::HighDimensionalCovariates {
            p: data.p(),
            min_group,
        });
    }

    let covariate_eigen = if data.n() >= 2 {
        let sigma = crate::calibration::sample_covariance_of(data)?;
        let eig = sigma.symmetric_eigenvalues();
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some((min, max))
    } else {
        None
    };

    Ok(ValidationSummary {
        group_sizes,
        tie_count,
        covariate_eigen,
        flags,
    })
}
