//! Monte Carlo engine: data-generating processes, replication loop, and the
//! AB/SD/SE/CP/P metrics table.
//!
//! Replications are embarrassingly parallel: each owns a seed substream
//! derived from the master seed, results are collected in replication order
//! and aggregated sequentially with compensated summation, so the output is
//! bit-identical for any worker count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::domain::{DesignSpec, TrialData};
use crate::error::{Error, Result};
use crate::inference::{self, TestConfig};
use crate::randomization::{
    assign_minimization, assign_simple, assign_stratified_block, substream_seed,
    RandomizationScheme, SchemeKind,
};

/// Standard-normal quartile cut points used to discretize the first
/// covariate into four equal-probability strata. Population constants, so
/// strata are stable across replications.
pub const STRATUM_CUTS: [f64; 3] = [-0.6745, 0.0, 0.6745];

/// Number of draws used by the theta truth oracle.
pub const ORACLE_DRAWS: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeFamily {
    Normal,
    DoubleExponential,
}

impl OutcomeFamily {
    fn default_variance(self) -> f64 {
        match self {
            OutcomeFamily::Normal => 0.25,
            OutcomeFamily::DoubleExponential => 0.5,
        }
    }
}

/// One simulation scenario: bivariate-normal covariates feeding a location
/// shift model, a randomization scheme, and a replication budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub outcome_family: OutcomeFamily,
    /// Location shift per arm index: outcome mean is a * (A - 1) + c'X.
    pub effect_a: f64,
    /// Correlation of the two covariate components.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Outcome-model coefficients on the covariates.
    #[serde(default = "default_coefficients")]
    pub coefficients: Vec<f64>,
    /// Conditional outcome variance; family default when omitted.
    #[serde(default)]
    pub outcome_variance: Option<f64>,
    pub n: usize,
    #[serde(default = "default_num_treatments")]
    pub num_treatments: usize,
    /// Allocation proportions; uniform when omitted.
    #[serde(default)]
    pub pi: Option<Vec<f64>>,
    pub randomizer: SchemeKind,
    pub replications: usize,
    pub seed: u64,
}

fn default_rho() -> f64 {
    0.3
}

fn default_coefficients() -> Vec<f64> {
    vec![0.3, 0.3]
}

fn default_num_treatments() -> usize {
    4
}

impl Scenario {
    pub fn pi(&self) -> Vec<f64> {
        self.pi
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.num_treatments as f64; self.num_treatments])
    }

    pub fn outcome_variance(&self) -> f64 {
        self.outcome_variance
            .unwrap_or_else(|| self.outcome_family.default_variance())
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::InvalidInput("replications must be >= 1".into()));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::InvalidInput(format!(
                "correlation must be in (-1, 1), got {}",
                self.rho
            )));
        }
        if !(self.outcome_variance() > 0.0) {
            return Err(Error::InvalidInput("outcome variance must be positive".into()));
        }
        if self.coefficients.len() != 2 {
            return Err(Error::InvalidInput(
                "covariate model is bivariate: exactly 2 coefficients".into(),
            ));
        }
        if self.num_treatments < 2 {
            return Err(Error::InvalidInput("need at least 2 treatments".into()));
        }
        let design = self.design()?;
        let _ = design;
        Ok(())
    }

    /// Design under comparison: pair (1, 2) at the scenario allocation.
    pub fn design(&self) -> Result<DesignSpec> {
        DesignSpec::new(self.pi(), (1, 2))
    }

    /// Stable hash of everything the theta oracle depends on.
    pub fn truth_cache_key(&self) -> u64 {
        use std::collections::hash_map::DefaultHasher;
        use std::hash::{Hash, Hasher};
        let mut h = DefaultHasher::new();
        format!(
            "{:?}|{}|{}|{:?}|{}",
            self.outcome_family,
            self.effect_a,
            self.rho,
            self.coefficients,
            self.outcome_variance()
        )
        .hash(&mut h);
        h.finish()
    }
}

fn stratum_of(x1: f64) -> usize {
    STRATUM_CUTS.iter().filter(|&&c| x1 > c).count()
}

fn sample_noise(family: OutcomeFamily, variance: f64, rng: &mut ChaCha12Rng) -> f64 {
    match family {
        OutcomeFamily::Normal => {
            let z: f64 = StandardNormal.sample(rng);
            z * variance.sqrt()
        }
        OutcomeFamily::DoubleExponential => {
            // Laplace via inverse CDF; variance 2 b^2 -> b = sqrt(variance / 2)
            let b = (variance / 2.0).sqrt();
            let u: f64 = rng.random::<f64>() - 0.5;
            -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
        }
    }
}

/// Draw one dataset for a replication: covariates, assignments, outcomes.
pub fn generate_dataset(scenario: &Scenario, replication_index: usize) -> Result<TrialData> {
    let rep_seed = substream_seed(scenario.seed, replication_index as u64);
    let mut rng = ChaCha12Rng::seed_from_u64(rep_seed);
    let n = scenario.n;
    let rho = scenario.rho;

    let mut covariates = Vec::with_capacity(n);
    let mut strata = Vec::with_capacity(n);
    for _ in 0..n {
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z2: f64 = StandardNormal.sample(&mut rng);
        let x1 = z1;
        let x2 = rho * z1 + (1.0 - rho * rho).sqrt() * z2;
        strata.push(stratum_of(x1));
        covariates.push(vec![x1, x2]);
    }

    let scheme = RandomizationScheme {
        kind: scenario.randomizer.clone(),
        pi: scenario.pi(),
        seed: substream_seed(rep_seed, 0x5eed),
    };
    let (assignments, kept_strata) = match &scenario.randomizer {
        SchemeKind::Simple => (assign_simple(n, &scheme)?, None),
        SchemeKind::StratifiedBlock { .. } => (
            assign_stratified_block(&strata, &scheme)?,
            Some(strata.clone()),
        ),
        SchemeKind::Minimization { .. } => {
            let levels: Vec<Vec<usize>> = strata.iter().map(|&z| vec![z]).collect();
            (assign_minimization(&levels, &scheme)?, Some(strata.clone()))
        }
    };

    let a = scenario.effect_a;
    let variance = scenario.outcome_variance();
    let c = &scenario.coefficients;
    let outcomes: Vec<f64> = (0..n)
        .map(|i| {
            let arm = assignments[i] as f64;
            let x = &covariates[i];
            a * (arm - 1.0) + c[0] * x[0] + c[1] * x[1]
                + sample_noise(scenario.outcome_family, variance, &mut rng)
        })
        .collect();

    TrialData::new(
        assignments,
        outcomes,
        covariates,
        kept_strata,
        scenario.num_treatments,
    )
}

/// Monte Carlo oracle for theta_12 = P(Y_1 <= Y_2) over the marginal outcome
/// laws (the location mixture over X has no closed form). Deterministic for a
/// given scenario; chunked so the integer tally is schedule-independent.
pub fn theta_truth_oracle(scenario: &Scenario, draws: u64) -> f64 {
    let key = scenario.truth_cache_key();
    const CHUNK: u64 = 250_000;
    let chunks: Vec<u64> = (0..draws.div_ceil(CHUNK)).collect();
    let tally = |chunk: &u64| -> u64 {
        let lo = chunk * CHUNK;
        let hi = (lo + CHUNK).min(draws);
        let mut rng = ChaCha12Rng::seed_from_u64(substream_seed(key, 0xAAAA ^ chunk));
        let a = scenario.effect_a;
        let rho = scenario.rho;
        let c = &scenario.coefficients;
        let variance = scenario.outcome_variance();
        let mut count = 0u64;
        for _ in lo..hi {
            let mut draw_y = |shift: f64| {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                let x2 = rho * z1 + (1.0 - rho * rho).sqrt() * z2;
                shift + c[0] * z1 + c[1] * x2
                    + sample_noise(scenario.outcome_family, variance, &mut rng)
            };
            let y1 = draw_y(0.0);
            let y2 = draw_y(a);
            if y1 <= y2 {
                count += 1;
            }
        }
        count
    };

    #[cfg(feature = "parallel")]
    let total: u64 = chunks.par_iter().map(tally).sum();
    #[cfg(not(feature = "parallel"))]
    let total: u64 = chunks.iter().map(tally).sum();

    total as f64 / draws as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    MeanDiff,
    U,
    UAdjusted,
}

pub const ESTIMATORS: [EstimatorKind; 3] =
    [EstimatorKind::MeanDiff, EstimatorKind::U, EstimatorKind::UAdjusted];

/// Aggregated metrics for one estimator over all replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: EstimatorKind,
    /// Average of (estimate - truth).
    pub ab: f64,
    /// Empirical standard deviation of estimates; null when R = 1.
    pub sd: Option<f64>,
    /// Average of estimated standard errors.
    pub se: f64,
    /// Coverage probability of the nominal 95% interval.
    pub cp: f64,
    /// Rejection rate: type I error when the truth is null, power otherwise.
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub scenario: Scenario,
    pub truth_theta: f64,
    pub truth_mean_diff: f64,
    pub rows: Vec<MetricsRow>,
}

struct RepOutcome {
    estimate: [f64; 3],
    se: [f64; 3],
    covered: [bool; 3],
    rejected: [bool; 3],
}

fn run_one(
    scenario: &Scenario,
    rep: usize,
    truth_theta: f64,
    truth_mean_diff: f64,
) -> Result<RepOutcome> {
    let data = generate_dataset(scenario, rep)?;
    let design = scenario.design()?;
    let config = TestConfig::default();

    let t = inference::t_test_baseline(&data, &design, &config)?;
    let unadj = inference::wmw_test_unadjusted(&data, &design, &config)?;
    let adj = inference::wmw_test_adjusted(&data, &design, &config)?;
    // CI for the unadjusted/adjusted statistics per the consistent variance
    // estimator; the adjusted test report already carries that interval.
    let ci_u = &unadj.estimate;
    let ci_uc = &adj.estimate;

    let covers = |lo: f64, hi: f64, truth: f64| lo <= truth && truth <= hi;
    Ok(RepOutcome {
        estimate: [t.estimate.point, ci_u.point, ci_uc.point],
        se: [t.estimate.std_error, ci_u.std_error, ci_uc.std_error],
        covered: [
            covers(t.estimate.ci_low, t.estimate.ci_high, truth_mean_diff),
            covers(ci_u.ci_low, ci_u.ci_high, truth_theta),
            covers(ci_uc.ci_low, ci_uc.ci_high, truth_theta),
        ],
        rejected: [t.reject, unadj.reject, adj.reject],
    })
}

/// Kahan-compensated accumulator.
#[derive(Default, Clone, Copy)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, value: f64) {
        let y = value - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Execution mode of the replication loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Parallelism {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        Parallelism::Parallel
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        Parallelism::Sequential
    }
}

/// Run the full study with the default execution mode.
pub fn run_study(scenario: &Scenario, estimand_truth: Option<f64>) -> Result<StudyTable> {
    run_study_with(scenario, estimand_truth, Parallelism::default())
}

/// Run the full study, aggregating AB/SD/SE/CP/P per estimator.
///
/// `estimand_truth` overrides the theta oracle (useful when the truth is
/// known exactly, e.g. 1/2 under the null).
pub fn run_study_with(
    scenario: &Scenario,
    estimand_truth: Option<f64>,
    mode: Parallelism,
) -> Result<StudyTable> {
    scenario.validate()?;
    let truth_theta = estimand_truth.unwrap_or_else(|| theta_truth_oracle(scenario, ORACLE_DRAWS));
    // pair (1, 2): mean difference E(Y_1) - E(Y_2) = -a
    let truth_mean_diff = -scenario.effect_a;
    let reps = scenario.replications;

    let run = |rep: &usize| -> Result<RepOutcome> {
        run_one(scenario, *rep, truth_theta, truth_mean_diff).map_err(|e| Error::Replication {
            index: *rep,
            seed: substream_seed(scenario.seed, *rep as u64),
            source: Box::new(e),
        })
    };
    let indices: Vec<usize> = (0..reps).collect();
    let outcomes: Vec<RepOutcome> = match mode {
        Parallelism::Sequential => indices.iter().map(run).collect::<Result<_>>()?,
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => indices.par_iter().map(run).collect::<Result<_>>()?,
    };

    let truths = [truth_mean_diff, truth_theta, truth_theta];
    let mut rows = Vec::with_capacity(3);
    for (slot, &estimator) in ESTIMATORS.iter().enumerate() {
        let mut sum = Kahan::default();
        let mut sum_se = Kahan::default();
        let mut covered = 0usize;
        let mut rejected = 0usize;
        for o in &outcomes {
            sum.add(o.estimate[slot]);
            sum_se.add(o.se[slot]);
            covered += o.covered[slot] as usize;
            rejected += o.rejected[slot] as usize;
        }
        let r = reps as f64;
        let mean = sum.sum / r;
        let sd = if reps > 1 {
            let mut ss = Kahan::default();
            for o in &outcomes {
                let d = o.estimate[slot] - mean;
                ss.add(d * d);
            }
            Some((ss.sum / (r - 1.0)).sqrt())
        } else {
            None
        };
        rows.push(MetricsRow {
            estimator,
            ab: mean - truths[slot],
            sd,
            se: sum_se.sum / r,
            cp: covered as f64 / r,
            p: rejected as f64 / r,
        });
    }

    Ok(StudyTable {
        scenario: scenario.clone(),
        truth_theta,
        truth_mean_diff,
        rows,
    })
}
