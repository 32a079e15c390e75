//! Least-squares calibration of predictor logits.
//!
//! An affinely miscalibrated predictor has logit `y = a + b (gamma . z - s) + noise`,
//! so regressing `y` on `[1, z, s_hat]` gives `theta_z = b gamma` and
//! `theta_s = -b`; the ratio `gamma = theta_z / (-theta_s)` does not depend on
//! the unknown bias `(a, b)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::choice::{dot, inclusive_value, inside_utilities, logistic, ChoiceInstance};
use crate::error::{check_dim, CalibError, Result};
use crate::utility::UtilityModel;

pub const DEFAULT_RIDGE: f64 = 1e-9;
pub const DEFAULT_SLOPE_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub a_hat: f64,
    pub theta_z: Vec<f64>,
    pub theta_s: f64,
    pub gamma_hat: Vec<f64>,
    pub ridge_lambda: f64,
    /// Smallest eigenvalue of the centered covariance of `[z, s_hat]`.
    pub condition_estimate: f64,
}

/// Raw ridge least-squares coefficients `(a, theta_z, theta_s)`, no slope check.
pub(crate) fn ols_coefficients(
    z: &[Vec<f64>],
    s_hat: &[f64],
    y: &[f64],
    ridge_lambda: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    let n = z.len();
    check_dim("s_hat length", n, s_hat.len())?;
    check_dim("y length", n, y.len())?;
    let d = z.first().map_or(0, Vec::len);
    if n < d + 2 {
        return Err(CalibError::Config(format!("need at least d + 2 = {} samples, got {n}", d + 2)));
    }
    let k = d + 2;
    let mut ata = DMatrix::<f64>::zeros(k, k);
    let mut aty = DVector::<f64>::zeros(k);
    let mut row = vec![0.0; k];
    for i in 0..n {
        check_dim("context features", d, z[i].len())?;
        row[0] = 1.0;
        row[1..=d].copy_from_slice(&z[i]);
        row[d + 1] = s_hat[i];
        if row.iter().any(|v| !v.is_finite()) || !y[i].is_finite() {
            return Err(CalibError::Data(format!("non-finite regressor in row {i}")));
        }
        for r in 0..k {
            aty[r] += row[r] * y[i];
            for c in r..k {
                ata[(r, c)] += row[r] * row[c];
            }
        }
    }
    for r in 0..k {
        for c in 0..r {
            ata[(r, c)] = ata[(c, r)];
        }
    }
    // intercept is not penalized
    for r in 1..k {
        ata[(r, r)] += ridge_lambda;
    }
    let chol = ata.cholesky().ok_or(CalibError::SingularDesign)?;
    let theta = chol.solve(&aty);
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(CalibError::SingularDesign);
    }
    Ok((theta[0], theta.rows(1, d).iter().copied().collect(), theta[d + 1]))
}

fn centered_min_eigenvalue(z: &[Vec<f64>], s_hat: &[f64]) -> f64 {
    let n = z.len() as f64;
    let d = z.first().map_or(0, Vec::len);
    let k = d + 1;
    let mut mean = vec![0.0; k];
    for (zi, si) in z.iter().zip(s_hat) {
        for j in 0..d {
            mean[j] += zi[j] / n;
        }
        mean[d] += si / n;
    }
    let mut cov = DMatrix::<f64>::zeros(k, k);
    let mut w = vec![0.0; k];
    for (zi, si) in z.iter().zip(s_hat) {
        for j in 0..d {
            w[j] = zi[j] - mean[j];
        }
        w[d] = si - mean[d];
        for r in 0..k {
            for c in 0..k {
                cov[(r, c)] += w[r] * w[c] / n;
            }
        }
    }
    SymmetricEigen::new(cov).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Ridge-stabilized least squares of `y` on `[1, z, s_hat]`, solved through a
/// Cholesky factorization of the normal equations.
pub fn fit_linear(
    z: &[Vec<f64>],
    s_hat: &[f64],
    y: &[f64],
    ridge_lambda: f64,
    slope_threshold: f64,
) -> Result<LinearFit> {
    let (a_hat, theta_z, theta_s) = ols_coefficients(z, s_hat, y, ridge_lambda)?;
    if theta_s.abs() < slope_threshold {
        return Err(CalibError::DegenerateSlope { theta_s, threshold: slope_threshold });
    }
    let gamma_hat = theta_z.iter().map(|t| t / -theta_s).collect();
    Ok(LinearFit {
        a_hat,
        theta_z,
        theta_s,
        gamma_hat,
        ridge_lambda,
        condition_estimate: centered_min_eigenvalue(z, s_hat),
    })
}

/// Calibrated outside probability `logistic(gamma_hat . z - s_hat)`.
pub fn predict_p0(gamma_hat: &[f64], model: &UtilityModel, instance: &ChoiceInstance) -> Result<f64> {
    check_dim("context features", gamma_hat.len(), instance.context.0.len())?;
    let s = inclusive_value(&inside_utilities(&model.beta_hat, instance)?)?;
    Ok(predict_p0_from_parts(gamma_hat, &instance.context.0, s))
}

pub fn predict_p0_from_parts(gamma_hat: &[f64], z: &[f64], s_hat: f64) -> f64 {
    logistic(dot(gamma_hat, z) - s_hat)
}

impl LinearFit {
    pub fn predict_p0(&self, model: &UtilityModel, instance: &ChoiceInstance) -> Result<f64> {
        if self.theta_s.abs() < DEFAULT_SLOPE_THRESHOLD || self.gamma_hat.iter().any(|g| !g.is_finite()) {
            return Err(CalibError::DegenerateSlope { theta_s: self.theta_s, threshold: DEFAULT_SLOPE_THRESHOLD });
        }
        predict_p0(&self.gamma_hat, model, instance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::{ContextFeatures, ItemFeatures, OfferedItem};
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_logits_have_no_slope() {
        let z: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()]).collect();
        let s: Vec<f64> = (0..30).map(|i| 1.0 + (i as f64 * 0.71).sin()).collect();
        let y = vec![0.7; 30];
        assert!(matches!(
            fit_linear(&z, &s, &y, DEFAULT_RIDGE, DEFAULT_SLOPE_THRESHOLD),
            Err(CalibError::DegenerateSlope { .. })
        ));
    }

    #[test]
    fn too_few_rows() {
        let z = vec![vec![1.0, 2.0]; 3];
        assert!(matches!(fit_linear(&z, &[0.0; 3], &[0.0; 3], 0.0, 1e-8), Err(CalibError::Config(_))));
    }

    #[test]
    fn collinear_design_without_ridge_is_singular() {
        let z: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let s: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(fit_linear(&z, &s, &y, 0.0, 1e-8).unwrap_err(), CalibError::SingularDesign);
    }

    #[test]
    fn p0_prediction() {
        let inst = ChoiceInstance {
            context: ContextFeatures(vec![1.0]),
            items: vec![
                OfferedItem { id: 0, x: ItemFeatures(vec![0.0]), revenue: None },
                OfferedItem { id: 1, x: ItemFeatures(vec![0.0]), revenue: None },
            ],
            chosen: None,
        };
        let m = UtilityModel::from_beta(vec![3.0]);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(predict_p0(&[1.0], &m, &inst).unwrap(), e / (2.0 + e), epsilon = 1e-15);
        assert_eq!(predict_p0_from_parts(&[0.0], &[4.0], 0.0), 0.5);
        let degenerate = LinearFit {
            a_hat: 0.0,
            theta_z: vec![0.0],
            theta_s: 0.0,
            gamma_hat: vec![f64::NAN],
            ridge_lambda: 0.0,
            condition_estimate: 0.0,
        };
        assert!(matches!(degenerate.predict_p0(&m, &inst), Err(CalibError::DegenerateSlope { .. })));
    }
}
