//! Variance estimation, asymptotic tests, and confidence intervals.
//!
//! The asymptotic variance of sqrt(n) (U^C - theta) is tau_jk + tau_kj -
//! phi_jk; tau terms come from placement second moments, phi from the fitted
//! calibration coefficients. Under the null both tests reduce to comparing a
//! sqrt(n)-standardized distance from 1/2 against a normal quantile.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::calibration::{
    self, AdjustMode, CalibrationFit, CalibrationOptions, CalibrationSummary,
};
use crate::domain::{DesignSpec, EstimateReport, Method, TrialData};
use crate::error::{Error, Result};
use crate::rank_core::{self, Kernel};

use nalgebra::{DMatrix, DVector};

const NULL_VARIANCE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PiSource {
    /// Allocation proportions are the design constants (the default).
    #[default]
    Design,
    /// Estimate pi_j = n_j / n from the data. Opt-in; flagged in reports.
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub alpha: f64,
    /// Continuity-corrected null variance for the unadjusted test only.
    pub continuity_correction: bool,
    pub pi_source: PiSource,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            continuity_correction: false,
            pi_source: PiSource::Design,
        }
    }
}

impl TestConfig {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::InvalidInput(format!(
                "alpha must be in (0, 0.5), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub tau_jk_hat: f64,
    pub tau_kj_hat: f64,
    pub phi_jk_hat: f64,
    /// tau_jk + tau_kj - phi_jk, floored at zero.
    pub asymptotic_variance: f64,
    pub floored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    /// Standardized statistic: the test quantity over its null standard error.
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
    pub estimate: EstimateReport,
    pub method: Method,
    pub continuity_correction: bool,
    pub pi_source: PiSource,
    pub calibration: Option<CalibrationSummary>,
    pub notes: Vec<String>,
}

fn std_normal() -> Normal {
    Normal::standard()
}

pub fn z_quantile(alpha: f64) -> f64 {
    std_normal().inverse_cdf(1.0 - alpha / 2.0)
}

fn two_sided_p(statistic: f64) -> f64 {
    2.0 * (1.0 - std_normal().cdf(statistic.abs()))
}

/// Effective allocation proportions for the compared pair.
fn effective_pi(data: &TrialData, design: &DesignSpec, source: PiSource) -> (f64, f64) {
    match source {
        PiSource::Design => design.pi_pair(),
        PiSource::Empirical => {
            let n = data.n() as f64;
            (
                data.group_size(design.pair.0) as f64 / n,
                data.group_size(design.pair.1) as f64 / n,
            )
        }
    }
}

/// The general phi expression of the limiting variance, evaluated at
/// arbitrary coefficient estimates.
pub fn phi_general(
    beta_j: &DVector<f64>,
    beta_k: &DVector<f64>,
    sigma: &DMatrix<f64>,
    pi_j: f64,
    pi_k: f64,
) -> f64 {
    let mix = beta_k * pi_j + beta_j * pi_k;
    let first = (mix.transpose() * sigma * &mix)[(0, 0)] / (pi_j * pi_k * (pi_j + pi_k));
    let diff = beta_j - beta_k;
    let second =
        (1.0 - pi_j - pi_k) * (diff.transpose() * sigma * &diff)[(0, 0)] / (pi_j + pi_k);
    first + second
}

/// The null-hypothesis simplification phi = b' Sigma b (1/pi_j + 1/pi_k)
/// with the pooled coefficient b = (pi_j b_j + pi_k b_k)/(pi_j + pi_k).
pub fn phi_under_null(
    beta_pooled: &DVector<f64>,
    sigma_hat: &DMatrix<f64>,
    design: &DesignSpec,
) -> f64 {
    let (pi_j, pi_k) = design.pi_pair();
    let bsb = (beta_pooled.transpose() * sigma_hat * beta_pooled)[(0, 0)];
    bsb * (1.0 / pi_j + 1.0 / pi_k)
}

/// Placement-based plug-in estimates of tau_jk, tau_kj plus the fitted phi.
pub fn variance_components(
    data: &TrialData,
    design: &DesignSpec,
    fit: &CalibrationFit,
) -> Result<VarianceComponents> {
    variance_components_with_pi(data, design, fit, design.pi_pair())
}

fn variance_components_with_pi(
    data: &TrialData,
    design: &DesignSpec,
    fit: &CalibrationFit,
    (pi_j, pi_k): (f64, f64),
) -> Result<VarianceComponents> {
    if !(pi_j > 0.0 && pi_k > 0.0) {
        return Err(Error::InvalidDesign("pair proportions must be positive".into()));
    }
    let sample = calibration::pair_sample(data, design)?;
    let u = rank_core::compute_u(&sample, Kernel::Fast);
    let pv = rank_core::placements(&sample);
    let mean_sq = |g: &[f64]| g.iter().map(|&x| x * x).sum::<f64>() / g.len() as f64;
    let tau_jk_hat = ((mean_sq(&pv.g_j) - u * u) / pi_j).max(0.0);
    let tau_kj_hat = ((mean_sq(&pv.g_k) - u * u) / pi_k).max(0.0);
    let phi_jk_hat = phi_general(&fit.beta_j_hat, &fit.beta_k_hat, &fit.sigma_hat, pi_j, pi_k);
    let raw = tau_jk_hat + tau_kj_hat - phi_jk_hat;
    let floored = raw < 0.0;
    Ok(VarianceComponents {
        tau_jk_hat,
        tau_kj_hat,
        phi_jk_hat,
        asymptotic_variance: raw.max(0.0),
        floored,
    })
}

/// Unadjusted Wilcoxon-Mann-Whitney test with null variance
/// (1/12)(1/pi_j + 1/pi_k), optionally continuity-corrected.
pub fn wmw_test_unadjusted(
    data: &TrialData,
    design: &DesignSpec,
    config: &TestConfig,
) -> Result<TestReport> {
    config.validate()?;
    let sample = calibration::pair_sample(data, design)?;
    let u = rank_core::compute_u(&sample, Kernel::Fast);
    let n = data.n() as f64;
    let (pi_j, pi_k) = effective_pi(data, design, config.pi_source);
    let pi_term = if config.continuity_correction {
        let n_j = sample.n_j() as f64;
        let n_k = sample.n_k() as f64;
        n / n_j + n / n_k + n / (n_j * n_k)
    } else {
        1.0 / pi_j + 1.0 / pi_k
    };
    let null_sd = (pi_term / 12.0).sqrt();
    let statistic = n.sqrt() * (u - 0.5) / null_sd;
    let p_value = two_sided_p(statistic);

    // CI from the consistent variance estimator, valid under simple
    // randomization only.
    let fit = zero_fit(data.p());
    let vc = variance_components_with_pi(data, design, &fit, (pi_j, pi_k))?;
    let se = ((vc.tau_jk_hat + vc.tau_kj_hat) / n).sqrt();
    let z = z_quantile(config.alpha);
    let mut notes = vec![
        "unadjusted interval is valid only under simple randomization".to_string(),
    ];
    if config.pi_source == PiSource::Empirical {
        notes.push("allocation proportions estimated from data".to_string());
    }
    Ok(TestReport {
        statistic,
        p_value,
        reject: p_value < config.alpha,
        alpha: config.alpha,
        estimate: EstimateReport {
            point: u,
            std_error: se,
            ci_low: u - z * se,
            ci_high: u + z * se,
            method: Method::UnadjustedU,
        },
        method: Method::UnadjustedU,
        continuity_correction: config.continuity_correction,
        pi_source: config.pi_source,
        calibration: None,
        notes,
    })
}

/// A calibration fit with zero coefficients, used where phi must vanish.
fn zero_fit(p: usize) -> CalibrationFit {
    CalibrationFit {
        sigma_hat: DMatrix::zeros(p, p),
        c_jk_hat: DVector::zeros(p),
        c_kj_hat: DVector::zeros(p),
        beta_j_hat: DVector::zeros(p),
        beta_k_hat: DVector::zeros(p),
        xbar_j: DVector::zeros(p),
        xbar_k: DVector::zeros(p),
        xbar_all: DVector::zeros(p),
        xbar_jk: DVector::zeros(p),
        eigen_range: (0.0, 0.0),
        ridge_used: None,
    }
}

/// Covariate-adjusted Wilcoxon-Mann-Whitney test with null variance
/// (1/12 - b' Sigma b)(1/pi_j + 1/pi_k).
pub fn wmw_test_adjusted(
    data: &TrialData,
    design: &DesignSpec,
    config: &TestConfig,
) -> Result<TestReport> {
    wmw_test_adjusted_with(
        data,
        design,
        config,
        &CalibrationOptions::default(),
        AdjustMode::PooledMean,
    )
}

pub fn wmw_test_adjusted_with(
    data: &TrialData,
    design: &DesignSpec,
    config: &TestConfig,
    options: &CalibrationOptions,
    mode: AdjustMode,
) -> Result<TestReport> {
    config.validate()?;
    let est = calibration::adjusted_u(data, design, mode, options)?;
    let n = data.n() as f64;
    let (pi_j, pi_k) = effective_pi(data, design, config.pi_source);
    let bsb = est.fit.beta_sigma_beta(design);
    let raw = 1.0 / 12.0 - bsb;
    if raw <= 0.0 {
        return Err(Error::NonPositiveNullVariance { value: raw });
    }
    let null_var = raw.max(NULL_VARIANCE_EPS) * (1.0 / pi_j + 1.0 / pi_k);
    let statistic = n.sqrt() * (est.u_adjusted - 0.5) / null_var.sqrt();
    let p_value = two_sided_p(statistic);

    let vc = variance_components_with_pi(data, design, &est.fit, (pi_j, pi_k))?;
    let se = (vc.asymptotic_variance / n).sqrt();
    let z = z_quantile(config.alpha);
    let mut notes = Vec::new();
    if vc.floored {
        notes.push("asymptotic variance floored at zero".to_string());
    }
    if let Some(lambda) = est.fit.ridge_used {
        notes.push(format!("ridge fallback applied with lambda = {lambda}"));
    }
    if config.pi_source == PiSource::Empirical {
        notes.push("allocation proportions estimated from data".to_string());
    }
    let u_c = est.u_adjusted;
    let method = match mode {
        AdjustMode::PooledMean => Method::AdjustedU,
        AdjustMode::RestrictedMean => Method::RestrictedAdjustedU,
    };
    Ok(TestReport {
        statistic,
        p_value,
        reject: p_value < config.alpha,
        alpha: config.alpha,
        estimate: EstimateReport {
            point: u_c,
            std_error: se,
            ci_low: u_c - z * se,
            ci_high: u_c + z * se,
            method,
        },
        method,
        continuity_correction: false,
        pi_source: config.pi_source,
        calibration: Some(est.fit.summary()),
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    Unadjusted,
    Adjusted,
}

/// Normal-theory confidence interval for theta_jk.
pub fn confidence_interval(
    data: &TrialData,
    design: &DesignSpec,
    method: CiMethod,
    alpha: f64,
) -> Result<EstimateReport> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidInput(format!(
            "alpha must be in (0, 0.5), got {alpha}"
        )));
    }
    let n = data.n() as f64;
    let z = z_quantile(alpha);
    match method {
        CiMethod::Unadjusted => {
            let sample = calibration::pair_sample(data, design)?;
            let u = rank_core::compute_u(&sample, Kernel::Fast);
            let vc = variance_components(data, design, &zero_fit(data.p()))?;
            let se = ((vc.tau_jk_hat + vc.tau_kj_hat) / n).sqrt();
            Ok(EstimateReport {
                point: u,
                std_error: se,
                ci_low: u - z * se,
                ci_high: u + z * se,
                method: Method::UnadjustedU,
            })
        }
        CiMethod::Adjusted => {
            let est = calibration::adjusted_u(
                data,
                design,
                AdjustMode::PooledMean,
                &CalibrationOptions::default(),
            )?;
            let vc = variance_components(data, design, &est.fit)?;
            let se = (vc.asymptotic_variance / n).sqrt();
            Ok(EstimateReport {
                point: est.u_adjusted,
                std_error: se,
                ci_low: est.u_adjusted - z * se,
                ci_high: est.u_adjusted + z * se,
                method: Method::AdjustedU,
            })
        }
    }
}

/// Welch two-sample t statistic on the pair, with a two-sided normal
/// approximation p-value. The estimate is the mean difference Ybar_j - Ybar_k.
pub fn t_test_baseline(
    data: &TrialData,
    design: &DesignSpec,
    config: &TestConfig,
) -> Result<TestReport> {
    config.validate()?;
    let (j, k) = design.pair;
    let y_j = data.group_outcomes(j);
    let y_k = data.group_outcomes(k);
    if y_j.len() < 2 {
        return Err(Error::InvalidInput(format!("group {j} needs at least 2 units")));
    }
    if y_k.len() < 2 {
        return Err(Error::InvalidInput(format!("group {k} needs at least 2 units")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], m: f64| {
        v.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    let m_j = mean(&y_j);
    let m_k = mean(&y_k);
    let v_j = var(&y_j, m_j);
    let v_k = var(&y_k, m_k);
    if v_j == 0.0 && v_k == 0.0 {
        return Err(Error::InvalidInput(
            "zero outcome variance in both groups".into(),
        ));
    }
    let diff = m_j - m_k;
    let se = (v_j / y_j.len() as f64 + v_k / y_k.len() as f64).sqrt();
    let statistic = diff / se;
    let p_value = two_sided_p(statistic);
    let z = z_quantile(config.alpha);
    Ok(TestReport {
        statistic,
        p_value,
        reject: p_value < config.alpha,
        alpha: config.alpha,
        estimate: EstimateReport {
            point: diff,
            std_error: se,
            ci_low: diff - z * se,
            ci_high: diff + z * se,
            method: Method::MeanDifference,
        },
        method: Method::MeanDifference,
        continuity_correction: false,
        pi_source: config.pi_source,
        calibration: None,
        notes: vec![],
    })
}
