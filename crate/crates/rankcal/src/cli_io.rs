//! Dataset ingestion, configuration, and machine-readable reporting for the
//! two workflows: analyzing a trial CSV and running a simulation study.
//!
//! CSV in, JSON out, plus aligned text tables for humans. Every number in
//! the JSON documents comes from one of the statistical modules; nothing is
//! computed ad hoc here.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{AdjustMode, CalibrationOptions, CalibrationSummary};
use crate::domain::{DesignSpec, TrialData, ValidationSummary};
use crate::error::{Error, Result};
use crate::inference::{
    self, CiMethod, PiSource, TestConfig, TestReport, VarianceComponents,
};
use crate::simlab::{Scenario, StudyTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// One ordered pair of arm labels (j, k).
    Pair { j: String, k: String },
    /// Every other arm compared against the named control, as (arm, control).
    AllVsControl { control: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdjustmentMode {
    #[default]
    Pooled,
    Restricted,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub treatment_column: String,
    pub outcome_column: String,
    pub covariate_columns: Vec<String>,
    #[serde(default)]
    pub stratum_column: Option<String>,
    /// Arm labels in declared order; label i maps to treatment i+1.
    pub arm_order: Vec<String>,
    pub comparison: Comparison,
    pub pi: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub continuity_correction: bool,
    #[serde(default)]
    pub adjustment: AdjustmentMode,
    #[serde(default)]
    pub pi_source: PiSource,
    #[serde(default)]
    pub ridge: Option<f64>,
}

fn default_alpha() -> f64 {
    0.05
}

impl AnalysisConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
        parse_config(&text, path)
    }

    fn requested_pairs(&self) -> Result<Vec<(usize, usize)>> {
        let label_index = |label: &str| -> Result<usize> {
            self.arm_order
                .iter()
                .position(|l| l == label)
                .map(|i| i + 1)
                .ok_or_else(|| {
                    Error::InvalidInput(format!("arm label `{label}` not in arm_order"))
                })
        };
        match &self.comparison {
            Comparison::Pair { j, k } => Ok(vec![(label_index(j)?, label_index(k)?)]),
            Comparison::AllVsControl { control } => {
                let c = label_index(control)?;
                Ok((1..=self.arm_order.len())
                    .filter(|&arm| arm != c)
                    .map(|arm| (arm, c))
                    .collect())
            }
        }
    }
}

/// Parse JSON or TOML based on the file extension (JSON when ambiguous).
fn parse_config<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let is_toml = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("toml"))
        .unwrap_or(false);
    if is_toml {
        toml::from_str(text).map_err(|e| Error::InvalidInput(format!("TOML config: {e}")))
    } else {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("JSON config: {e}")))
    }
}

/// Read a headered CSV into typed trial data, mapping arm labels to 1..J in
/// the order declared by the config.
pub fn ingest_csv(path: &Path, config: &AnalysisConfig) -> Result<TrialData> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::InvalidInput(format!("missing header row: {e}")))?
        .clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("missing column `{name}`")))
    };
    let treat_col = column(&config.treatment_column)?;
    let outcome_col = column(&config.outcome_column)?;
    let covariate_cols: Vec<(usize, &String)> = config
        .covariate_columns
        .iter()
        .map(|name| column(name).map(|idx| (idx, name)))
        .collect::<Result<_>>()?;
    let stratum_col = config
        .stratum_column
        .as_ref()
        .map(|name| column(name))
        .transpose()?;

    let label_map: HashMap<&str, usize> = config
        .arm_order
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i + 1))
        .collect();

    let mut treatments = Vec::new();
    let mut outcomes = Vec::new();
    let mut covariates = Vec::new();
    let mut strata_labels: Vec<String> = Vec::new();

    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 1; // 1-based, excluding header
        let record =
            record.map_err(|e| Error::InvalidInput(format!("row {row}: {e}")))?;
        let cell = |idx: usize, name: &str| -> Result<&str> {
            let v = record
                .get(idx)
                .ok_or_else(|| Error::InvalidInput(format!("row {row}: missing column `{name}`")))?;
            if v.trim().is_empty() {
                return Err(Error::InvalidInput(format!(
                    "row {row}: empty cell in column `{name}`"
                )));
            }
            Ok(v.trim())
        };
        let parse_f64 = |idx: usize, name: &str| -> Result<f64> {
            let raw = cell(idx, name)?;
            raw.parse::<f64>().map_err(|_| {
                Error::InvalidInput(format!(
                    "row {row}: cannot parse `{raw}` in column `{name}` as a number"
                ))
            })
        };

        let label = cell(treat_col, &config.treatment_column)?;
        let arm = *label_map.get(label).ok_or_else(|| {
            Error::InvalidInput(format!(
                "row {row}: treatment label `{label}` not in arm_order {:?}",
                config.arm_order
            ))
        })?;
        treatments.push(arm);
        outcomes.push(parse_f64(outcome_col, &config.outcome_column)?);
        let mut xrow = Vec::with_capacity(covariate_cols.len());
        for &(idx, name) in &covariate_cols {
            xrow.push(parse_f64(idx, name)?);
        }
        covariates.push(xrow);
        if let Some(idx) = stratum_col {
            strata_labels.push(cell(idx, config.stratum_column.as_ref().unwrap())?.to_string());
        }
    }
    if treatments.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} contains no data rows",
            path.display()
        )));
    }

    let strata = if stratum_col.is_some() {
        // encode distinct stratum labels as consecutive integers
        let mut seen: HashMap<String, usize> = HashMap::new();
        Some(
            strata_labels
                .into_iter()
                .map(|l| {
                    let next = seen.len();
                    *seen.entry(l).or_insert(next)
                })
                .collect(),
        )
    } else {
        None
    };

    TrialData::new(
        treatments,
        outcomes,
        covariates,
        strata,
        config.arm_order.len(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair: (usize, usize),
    pub pair_labels: (String, String),
    pub validation: ValidationSummary,
    pub t_test: TestReport,
    pub unadjusted: TestReport,
    pub adjusted: Option<TestReport>,
    pub variance_components: Option<VarianceComponents>,
    pub calibration: Option<CalibrationSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub version: String,
    pub config_hash: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub pairs: Vec<PairResult>,
    pub provenance: Provenance,
}

pub fn config_hash<T: Serialize>(config: &T) -> u64 {
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};
    let mut h = DefaultHasher::new();
    serde_json::to_string(config).unwrap_or_default().hash(&mut h);
    h.finish()
}

/// The analyze workflow: every requested pair gets the t-test baseline, both
/// rank tests, and confidence intervals.
pub fn cmd_analyze(
    data: &TrialData,
    config: &AnalysisConfig,
    seed: Option<u64>,
) -> Result<ResultDocument> {
    let pairs = config.requested_pairs()?;
    let options = CalibrationOptions { ridge: config.ridge };
    let test_config = TestConfig {
        alpha: config.alpha,
        continuity_correction: config.continuity_correction,
        pi_source: config.pi_source,
    };
    let mut results = Vec::with_capacity(pairs.len());
    for (j, k) in pairs {
        let design = DesignSpec::new(config.pi.clone(), (j, k))?;
        let validation = crate::domain::validate_trial(data, &design)?;
        let t_test = inference::t_test_baseline(data, &design, &test_config)?;
        let mut unadjusted = inference::wmw_test_unadjusted(data, &design, &test_config)?;
        // the unadjusted report's interval is recomputed here so the emitted
        // document always carries the consistent-variance interval
        unadjusted.estimate =
            inference::confidence_interval(data, &design, CiMethod::Unadjusted, config.alpha)?;
        let (adjusted, variance_components, calibration) = match config.adjustment {
            AdjustmentMode::None => (None, None, None),
            mode => {
                let adjust_mode = match mode {
                    AdjustmentMode::Pooled => AdjustMode::PooledMean,
                    AdjustmentMode::Restricted => AdjustMode::RestrictedMean,
                    AdjustmentMode::None => unreachable!(),
                };
                let report = inference::wmw_test_adjusted_with(
                    data,
                    &design,
                    &test_config,
                    &options,
                    adjust_mode,
                )?;
                let fit = crate::calibration::fit_calibration(data, &design, &options)?;
                let vc = inference::variance_components(data, &design, &fit)?;
                let summary = fit.summary();
                (Some(report), Some(vc), Some(summary))
            }
        };
        results.push(PairResult {
            pair: (j, k),
            pair_labels: (
                config.arm_order[j - 1].clone(),
                config.arm_order[k - 1].clone(),
            ),
            validation,
            t_test,
            unadjusted,
            adjusted,
            variance_components,
            calibration,
        });
    }
    Ok(ResultDocument {
        pairs: results,
        provenance: Provenance {
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(config),
        },
    })
}

/// Aligned text table over the analyze results, one block per comparison.
pub fn analysis_table(doc: &ResultDocument) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>12} {:>10} {:>10} {:>22}",
        "comparison", "method", "p-value", "SE", "CI"
    );
    for pair in &doc.pairs {
        let name = format!("{} vs {}", pair.pair_labels.0, pair.pair_labels.1);
        let mut row = |method: &str, r: &TestReport| {
            let _ = writeln!(
                out,
                "{:<28} {:>12} {:>10.4} {:>10.4} {:>22}",
                name,
                method,
                r.p_value,
                r.estimate.std_error,
                format!("({:.4}, {:.4})", r.estimate.ci_low, r.estimate.ci_high),
            );
        };
        row("t-test", &pair.t_test);
        row("unadjusted", &pair.unadjusted);
        if let Some(adjusted) = &pair.adjusted {
            row("adjusted", adjusted);
        }
    }
    out
}

/// Exhaustive validation of a scenario config: every violation, not just the
/// first.
pub fn scenario_problems(scenario: &Scenario) -> Vec<String> {
    let mut problems = Vec::new();
    if scenario.replications < 1 {
        problems.push("replications must be >= 1".to_string());
    }
    if !(scenario.rho > -1.0 && scenario.rho < 1.0) {
        problems.push(format!("rho must be in (-1, 1), got {}", scenario.rho));
    }
    if !(scenario.outcome_variance() > 0.0) {
        problems.push(format!(
            "outcome variance must be positive, got {}",
            scenario.outcome_variance()
        ));
    }
    if scenario.coefficients.len() != 2 {
        problems.push(format!(
            "coefficients must have length 2, got {}",
            scenario.coefficients.len()
        ));
    }
    if scenario.num_treatments < 2 {
        problems.push(format!(
            "num_treatments must be >= 2, got {}",
            scenario.num_treatments
        ));
    }
    if scenario.n < 4 {
        problems.push(format!("n must be at least 4, got {}", scenario.n));
    }
    let pi = scenario.pi();
    if pi.len() != scenario.num_treatments {
        problems.push(format!(
            "pi has {} entries for {} treatments",
            pi.len(),
            scenario.num_treatments
        ));
    }
    if pi.iter().any(|&p| !(p > 0.0)) {
        problems.push("all pi entries must be positive".to_string());
    } else if (pi.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        problems.push(format!("pi sums to {}, expected 1", pi.iter().sum::<f64>()));
    }
    if let crate::randomization::SchemeKind::StratifiedBlock { block_size } = &scenario.randomizer
    {
        for (idx, &p) in pi.iter().enumerate() {
            let exact = *block_size as f64 * p;
            if (exact - exact.round()).abs() > 1e-9 || exact.round() < 1.0 {
                problems.push(format!(
                    "block_size {block_size} * pi_{} = {exact} is not a positive integer",
                    idx + 1
                ));
            }
        }
    }
    if let crate::randomization::SchemeKind::Minimization { biased_coin, .. } =
        &scenario.randomizer
    {
        if !(*biased_coin > 0.5 && *biased_coin <= 1.0) {
            problems.push(format!(
                "biased_coin must be in (0.5, 1], got {biased_coin}"
            ));
        }
    }
    problems
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    let scenario: Scenario = parse_config(&text, path)?;
    let problems = scenario_problems(&scenario);
    if !problems.is_empty() {
        return Err(Error::InvalidInput(format!(
            "invalid scenario config:\n  - {}",
            problems.join("\n  - ")
        )));
    }
    Ok(scenario)
}

/// Aligned text table over study metrics, one row per estimator.
pub fn study_table_text(table: &StudyTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "a = {}, n = {}, R = {}, truth theta = {:.4}",
        table.scenario.effect_a, table.scenario.n, table.scenario.replications, table.truth_theta
    );
    let _ = writeln!(
        out,
        "{:<12} {:>9} {:>9} {:>9} {:>7} {:>7}",
        "estimator", "AB", "SD", "SE", "CP", "P"
    );
    for row in &table.rows {
        let name = match row.estimator {
            crate::simlab::EstimatorKind::MeanDiff => "mean_diff",
            crate::simlab::EstimatorKind::U => "u",
            crate::simlab::EstimatorKind::UAdjusted => "u_adjusted",
        };
        let sd = row
            .sd
            .map(|v| format!("{v:>9.4}"))
            .unwrap_or_else(|| format!("{:>9}", "null"));
        let _ = writeln!(
            out,
            "{:<12} {:>9.4} {sd} {:>9.4} {:>7.3} {:>7.3}",
            name, row.ab, row.se, row.cp, row.p
        );
    }
    out
}
