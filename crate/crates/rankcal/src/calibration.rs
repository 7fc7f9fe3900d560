//! Covariate calibration of the Wilcoxon two-sample statistic.
//!
//! Estimates the covariance pieces (Sigma, C_jk, C_kj), solves for the
//! calibration coefficients beta, and forms the adjusted statistic
//! U^C = U + (Xbar_j - Xbar)' beta_j - (Xbar_k - Xbar)' beta_k, plus the
//! restricted variant that centers at the mean over groups j and k only.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{DesignSpec, TrialData};
use crate::error::{Error, Result};
use crate::rank_core::{self, Kernel, PairSample};

/// Relative eigenvalue threshold below which Sigma-hat is declared singular.
const SINGULARITY_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustMode {
    /// Center group covariate means at the mean over all units.
    PooledMean,
    /// Center at the mean over groups j and k only. Asymptotically dominated
    /// by the pooled mode when J > 2; provided for the efficiency comparison.
    RestrictedMean,
}

#[derive(Debug, Clone, Default)]
pub struct CalibrationOptions {
    /// Optional ridge term added to Sigma-hat when it is singular. Off by
    /// default because it perturbs the estimator.
    pub ridge: Option<f64>,
}

/// Fitted calibration pieces for one treatment pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFit {
    pub sigma_hat: DMatrix<f64>,
    pub c_jk_hat: DVector<f64>,
    pub c_kj_hat: DVector<f64>,
    pub beta_j_hat: DVector<f64>,
    pub beta_k_hat: DVector<f64>,
    pub xbar_j: DVector<f64>,
    pub xbar_k: DVector<f64>,
    pub xbar_all: DVector<f64>,
    pub xbar_jk: DVector<f64>,
    /// Smallest and largest eigenvalue of Sigma-hat.
    pub eigen_range: (f64, f64),
    /// Ridge actually applied, if the fallback was used.
    pub ridge_used: Option<f64>,
}

impl CalibrationFit {
    /// Pooled coefficient (pi_j b_j + pi_k b_k) / (pi_j + pi_k) from the
    /// null-hypothesis variance formula.
    pub fn beta_pooled(&self, design: &DesignSpec) -> DVector<f64> {
        let (pi_j, pi_k) = design.pi_pair();
        (&self.beta_j_hat * pi_j + &self.beta_k_hat * pi_k) / (pi_j + pi_k)
    }

    /// b' Sigma b for the pooled coefficient.
    pub fn beta_sigma_beta(&self, design: &DesignSpec) -> f64 {
        let b = self.beta_pooled(design);
        (b.transpose() * &self.sigma_hat * &b)[(0, 0)]
    }

    /// Serializable summary for reports.
    pub fn summary(&self) -> CalibrationSummary {
        CalibrationSummary {
            beta_j: self.beta_j_hat.iter().cloned().collect(),
            beta_k: self.beta_k_hat.iter().cloned().collect(),
            eigen_min: self.eigen_range.0,
            eigen_max: self.eigen_range.1,
            ridge: self.ridge_used,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub beta_j: Vec<f64>,
    pub beta_k: Vec<f64>,
    pub eigen_min: f64,
    pub eigen_max: f64,
    pub ridge: Option<f64>,
}

/// Adjusted statistic together with its ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedEstimate {
    pub u_unadjusted: f64,
    pub u_adjusted: f64,
    pub fit: CalibrationFit,
    pub mode: AdjustMode,
}

/// Outcomes of the design's pair as a `PairSample`.
pub fn pair_sample(data: &TrialData, design: &DesignSpec) -> Result<PairSample> {
    let (j, k) = design.pair;
    PairSample::new(data.group_outcomes(j), data.group_outcomes(k))
}

/// Unbiased sample covariance (divisor n - 1) of row vectors.
pub fn sample_covariance(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "sample covariance needs at least 2 rows, got {n}"
        )));
    }
    let p = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != p {
            return Err(Error::InvalidInput(format!(
                "row {i} has dimension {}, expected {p}",
                row.len()
            )));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                column: "covariates",
                row: i,
            });
        }
    }
    let mut mean = vec![0.0; p];
    for row in rows {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::zeros(p, p);
    for row in rows {
        for a in 0..p {
            let da = row[a] - mean[a];
            for b in a..p {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..p {
        for b in a..p {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok(cov)
}

/// Sample covariance of all covariate rows of a dataset.
pub fn sample_covariance_of(data: &TrialData) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = (0..data.n()).map(|i| data.covariate_row(i).to_vec()).collect();
    sample_covariance(&rows)
}

fn mean_of_rows(data: &TrialData, indices: &[usize]) -> DVector<f64> {
    let p = data.p();
    let mut m = DVector::zeros(p);
    for &i in indices {
        for (a, &x) in data.covariate_row(i).iter().enumerate() {
            m[a] += x;
        }
    }
    m / indices.len() as f64
}

/// Plug-in estimates of the covariances C_jk = Cov{F_k(Y_j), X_j} and
/// C_kj = Cov{F_j(Y_k), X_k}, computed from placement fractions.
pub fn estimate_c(data: &TrialData, design: &DesignSpec) -> Result<(DVector<f64>, DVector<f64>)> {
    let (j, k) = design.pair;
    let idx_j = data.group_indices(j);
    let idx_k = data.group_indices(k);
    if idx_j.is_empty() {
        return Err(Error::EmptyGroup { arm: j });
    }
    if idx_k.is_empty() {
        return Err(Error::EmptyGroup { arm: k });
    }
    let sample = pair_sample(data, design)?;
    // h_j[i] = fraction of group-k outcomes <= y_j[i]; taking placements of
    // the swapped sample gives exactly that in its g_k slot.
    let h_j = rank_core::placements(&sample.swapped()).g_k;
    let g_k = rank_core::placements(&sample).g_k;

    let xbar_j = mean_of_rows(data, &idx_j);
    let xbar_k = mean_of_rows(data, &idx_k);
    let p = data.p();

    let mut c_jk = DVector::zeros(p);
    for (pos, &i) in idx_j.iter().enumerate() {
        let row = data.covariate_row(i);
        for a in 0..p {
            c_jk[a] += h_j[pos] * (row[a] - xbar_j[a]);
        }
    }
    c_jk /= idx_j.len() as f64;

    let mut c_kj = DVector::zeros(p);
    for (pos, &i) in idx_k.iter().enumerate() {
        let row = data.covariate_row(i);
        for a in 0..p {
            c_kj[a] += g_k[pos] * (row[a] - xbar_k[a]);
        }
    }
    c_kj /= idx_k.len() as f64;

    Ok((c_jk, c_kj))
}

/// Solve Sigma * x = rhs via Cholesky after an eigenvalue-based singularity
/// check; never inverts Sigma explicitly.
fn spd_solve(
    sigma: &DMatrix<f64>,
    rhs: &DVector<f64>,
    options: &CalibrationOptions,
) -> Result<(DVector<f64>, (f64, f64), Option<f64>)> {
    let eigen = sigma.clone().symmetric_eigen();
    let smallest = eigen.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let largest = eigen
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);

    let singular = !(smallest > SINGULARITY_RTOL * largest.max(0.0)) || largest <= 0.0;
    let (matrix, ridge_used) = if singular {
        match options.ridge {
            Some(lambda) if lambda > 0.0 => {
                let mut m = sigma.clone();
                for a in 0..m.nrows() {
                    m[(a, a)] += lambda;
                }
                (m, Some(lambda))
            }
            _ => {
                // name the columns loading on the near-null eigenvector
                let which = eigen
                    .eigenvalues
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                let v = eigen.eigenvectors.column(which);
                let vmax = v.iter().map(|x| x.abs()).fold(0.0, f64::max);
                let columns: Vec<usize> = v
                    .iter()
                    .enumerate()
                    .filter(|(_, x)| x.abs() > 0.1 * vmax)
                    .map(|(i, _)| i)
                    .collect();
                return Err(Error::SingularCovariance {
                    smallest,
                    largest,
                    columns,
                });
            }
        }
    } else {
        (sigma.clone(), None)
    };

    let chol = matrix.cholesky().ok_or(Error::SingularCovariance {
        smallest,
        largest,
        columns: vec![],
    })?;
    Ok((chol.solve(rhs), (smallest, largest), ridge_used))
}

/// Fit Sigma-hat, C-hats and the calibration coefficients for the design pair.
pub fn fit_calibration(
    data: &TrialData,
    design: &DesignSpec,
    options: &CalibrationOptions,
) -> Result<CalibrationFit> {
    let sigma_hat = sample_covariance_of(data)?;
    let (c_jk_hat, c_kj_hat) = estimate_c(data, design)?;
    let (beta_j_hat, eigen_range, ridge_used) = spd_solve(&sigma_hat, &c_jk_hat, options)?;
    let (beta_k_hat, _, _) = spd_solve(&sigma_hat, &c_kj_hat, options)?;

    let (j, k) = design.pair;
    let idx_j = data.group_indices(j);
    let idx_k = data.group_indices(k);
    let all: Vec<usize> = (0..data.n()).collect();
    let mut jk = idx_j.clone();
    jk.extend_from_slice(&idx_k);

    Ok(CalibrationFit {
        sigma_hat,
        c_jk_hat,
        c_kj_hat,
        beta_j_hat,
        beta_k_hat,
        xbar_j: mean_of_rows(data, &idx_j),
        xbar_k: mean_of_rows(data, &idx_k),
        xbar_all: mean_of_rows(data, &all),
        xbar_jk: mean_of_rows(data, &jk),
        eigen_range,
        ridge_used,
    })
}

/// The adjusted Wilcoxon two-sample statistic.
pub fn adjusted_u(
    data: &TrialData,
    design: &DesignSpec,
    mode: AdjustMode,
    options: &CalibrationOptions,
) -> Result<AdjustedEstimate> {
    let fit = fit_calibration(data, design, options)?;
    let u = rank_core::compute_u(&pair_sample(data, design)?, Kernel::Fast);
    Ok(AdjustedEstimate {
        u_unadjusted: u,
        u_adjusted: adjust(u, &fit, mode),
        fit,
        mode,
    })
}

/// Apply the calibration offset to an already computed U.
pub fn adjust(u: f64, fit: &CalibrationFit, mode: AdjustMode) -> f64 {
    let center = match mode {
        AdjustMode::PooledMean => &fit.xbar_all,
        AdjustMode::RestrictedMean => &fit.xbar_jk,
    };
    let dj = &fit.xbar_j - center;
    let dk = &fit.xbar_k - center;
    u + dj.dot(&fit.beta_j_hat) - dk.dot(&fit.beta_k_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn covariance_hand_example() {
        let rows = vec![
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 2.0],
            vec![2.0, 2.0],
        ];
        let cov = sample_covariance(&rows).unwrap();
        assert_abs_diff_eq!(cov[(0, 0)], 4.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(cov[(1, 1)], 4.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(cov[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn covariance_scalar_and_degenerate() {
        let cov = sample_covariance(&[vec![0.0], vec![2.0]]).unwrap();
        assert_abs_diff_eq!(cov[(0, 0)], 2.0, epsilon = 1e-14);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| vec![1.0, 2.0]).collect();
        let zero = sample_covariance(&rows).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(sample_covariance(&[vec![1.0]]).is_err());
    }

    fn two_group_data(
        y_j: &[f64],
        x_j: &[Vec<f64>],
        y_k: &[f64],
        x_k: &[Vec<f64>],
    ) -> (TrialData, DesignSpec) {
        let mut treatments = vec![1; y_j.len()];
        treatments.extend(vec![2; y_k.len()]);
        let mut outcomes = y_j.to_vec();
        outcomes.extend_from_slice(y_k);
        let mut rows = x_j.to_vec();
        rows.extend_from_slice(x_k);
        let data = TrialData::new(treatments, outcomes, rows, None, 2).unwrap();
        let design = DesignSpec::new(vec![0.5, 0.5], (1, 2)).unwrap();
        (data, design)
    }

    #[test]
    fn c_hat_hand_example() {
        // group j: (Y,x) = (1,0),(3,1); group k: (Y,x) = (2, anything)
        let (data, design) = two_group_data(
            &[1.0, 3.0],
            &[vec![0.0], vec![1.0]],
            &[2.0],
            &[vec![7.0]],
        );
        let (c_jk, _) = estimate_c(&data, &design).unwrap();
        assert_abs_diff_eq!(c_jk[0], 0.25, epsilon = 1e-14);
    }

    #[test]
    fn c_hat_single_unit_and_constant_column() {
        let (data, design) = two_group_data(
            &[1.0],
            &[vec![3.0]],
            &[0.5, 2.0],
            &[vec![1.0], vec![2.0]],
        );
        let (c_jk, _) = estimate_c(&data, &design).unwrap();
        assert_eq!(c_jk[0], 0.0); // centering annihilates the single unit

        let (data, design) = two_group_data(
            &[1.0, 3.0],
            &[vec![5.0, 0.0], vec![5.0, 1.0]],
            &[2.0, 4.0],
            &[vec![5.0, 0.3], vec![5.0, 0.8]],
        );
        let (c_jk, c_kj) = estimate_c(&data, &design).unwrap();
        assert_eq!(c_jk[0], 0.0);
        assert_eq!(c_kj[0], 0.0);
    }

    #[test]
    fn duplicate_column_reported_as_singular() {
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let v = i as f64;
                vec![v, v] // exact collinearity
            })
            .collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64 * 0.7).collect();
        let (data, design) = two_group_data(&y[..5], &rows[..5], &y[5..], &rows[5..]);
        let err = fit_calibration(&data, &design, &CalibrationOptions::default()).unwrap_err();
        match err {
            Error::SingularCovariance { columns, .. } => {
                assert_eq!(columns, vec![0, 1]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn ridge_fallback_recovers() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let (data, design) = two_group_data(&y[..5], &rows[..5], &y[5..], &rows[5..]);
        let fit = fit_calibration(
            &data,
            &design,
            &CalibrationOptions { ridge: Some(1e-6) },
        )
        .unwrap();
        assert_eq!(fit.ridge_used, Some(1e-6));
    }

    #[test]
    fn beta_solves_normal_equations() {
        // constant-in-group covariate pattern with overall variation
        let (data, design) = two_group_data(
            &[1.0, 3.0],
            &[vec![0.0], vec![1.0]],
            &[2.0, 4.0],
            &[vec![0.25], vec![0.75]],
        );
        let fit = fit_calibration(&data, &design, &CalibrationOptions::default()).unwrap();
        // beta solves Sigma beta = C within tolerance
        let lhs = &fit.sigma_hat * &fit.beta_j_hat;
        for a in 0..lhs.len() {
            assert_abs_diff_eq!(lhs[a], fit.c_jk_hat[a], epsilon = 1e-8);
        }
    }

    #[test]
    fn balanced_covariates_leave_u_unchanged() {
        // identical covariate sets in both groups -> xbar_j = xbar_k = xbar
        let (data, design) = two_group_data(
            &[1.0, 3.0],
            &[vec![0.0], vec![1.0]],
            &[2.0, 4.0],
            &[vec![0.0], vec![1.0]],
        );
        let est = adjusted_u(&data, &design, AdjustMode::PooledMean, &Default::default()).unwrap();
        assert_abs_diff_eq!(est.u_adjusted, est.u_unadjusted, epsilon = 1e-14);
    }

    #[test]
    fn pooled_equals_restricted_when_two_arms() {
        let (data, design) = two_group_data(
            &[1.0, 3.0, 0.5],
            &[vec![0.1], vec![1.2], vec![-0.4]],
            &[2.0, 4.0, 1.7],
            &[vec![0.9], vec![0.2], vec![1.1]],
        );
        let pooled =
            adjusted_u(&data, &design, AdjustMode::PooledMean, &Default::default()).unwrap();
        let restricted =
            adjusted_u(&data, &design, AdjustMode::RestrictedMean, &Default::default()).unwrap();
        assert_abs_diff_eq!(pooled.u_adjusted, restricted.u_adjusted, epsilon = 1e-12);
    }

    #[test]
    fn adjustment_arithmetic() {
        // U=0.75, (Xbar_j - Xbar)'b_j = 0.1, (Xbar_k - Xbar)'b_k = -0.03 -> 0.88
        let fit = CalibrationFit {
            sigma_hat: DMatrix::identity(1, 1),
            c_jk_hat: DVector::zeros(1),
            c_kj_hat: DVector::zeros(1),
            beta_j_hat: DVector::from_vec(vec![0.5]),
            beta_k_hat: DVector::from_vec(vec![0.3]),
            xbar_j: DVector::from_vec(vec![0.2]),
            xbar_k: DVector::from_vec(vec![-0.1]),
            xbar_all: DVector::from_vec(vec![0.0]),
            xbar_jk: DVector::from_vec(vec![0.0]),
            eigen_range: (1.0, 1.0),
            ridge_used: None,
        };
        assert_abs_diff_eq!(
            adjust(0.75, &fit, AdjustMode::PooledMean),
            0.88,
            epsilon = 1e-14
        );
    }
}
