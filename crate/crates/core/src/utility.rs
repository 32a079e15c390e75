//! Inside-item utilities from purchase-only transactions.
//!
//! Conditional on buying inside the offered set, the MNL reduces to a softmax
//! over the offered items and no longer involves the outside utility, so the
//! linear coefficients can be fitted without ever observing a no-purchase.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::choice::{dot, inclusive_value, inside_utilities, log_sum_exp, ChoiceInstance};
use crate::error::{check_dim, CalibError, Result};

/// Relative singular-value cutoff on the stacked difference features.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    /// Reserved; the linear model has no free intercept to pin down.
    BaselineItemZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub iterations: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub converged: bool,
    /// Objective after every accepted step, starting at the initial point.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityModel {
    pub beta_hat: Vec<f64>,
    pub normalization: Normalization,
    pub fit_log: FitLog,
}

impl UtilityModel {
    pub fn from_beta(beta_hat: Vec<f64>) -> Self {
        Self {
            beta_hat,
            normalization: Normalization::None,
            fit_log: FitLog { iterations: 0, objective: f64::NAN, grad_norm: f64::NAN, converged: true, trace: vec![] },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MnlOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MnlOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 500 }
    }
}

fn chosen_index(t: &ChoiceInstance) -> Result<usize> {
    t.chosen
        .ok_or_else(|| CalibError::Data("transaction without a recorded inside purchase".into()))
}

/// Mean conditional log-likelihood
/// `(1/n) sum_k [beta . x_chosen - log sum_{j in S_k} exp(beta . x_j)]`.
pub fn conditional_log_likelihood(beta: &[f64], transactions: &[ChoiceInstance]) -> Result<f64> {
    let mut total = 0.0;
    for t in transactions {
        let c = chosen_index(t)?;
        let u = inside_utilities(beta, t)?;
        total += u[c] - log_sum_exp(&u);
    }
    Ok(total / transactions.len() as f64)
}

/// Gradient of [`conditional_log_likelihood`]: the mean of
/// `x_chosen - sum_j pi_j x_j` with softmax weights `pi`.
pub fn conditional_gradient(beta: &[f64], transactions: &[ChoiceInstance]) -> Result<Vec<f64>> {
    let p = beta.len();
    let mut grad = vec![0.0; p];
    for t in transactions {
        let c = chosen_index(t)?;
        let u = inside_utilities(beta, t)?;
        let lse = log_sum_exp(&u);
        for (j, item) in t.items.iter().enumerate() {
            let w = (u[j] - lse).exp() - if j == c { 1.0 } else { 0.0 };
            for (g, x) in grad.iter_mut().zip(&item.x.0) {
                *g -= w * x;
            }
        }
    }
    let n = transactions.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

/// Negated Hessian of [`conditional_log_likelihood`]: the mean within-set
/// covariance of the item features under the softmax weights.
fn information_matrix(beta: &[f64], transactions: &[ChoiceInstance]) -> Result<DMatrix<f64>> {
    let p = beta.len();
    let mut info = DMatrix::<f64>::zeros(p, p);
    for t in transactions {
        let u = inside_utilities(beta, t)?;
        let lse = log_sum_exp(&u);
        let pi: Vec<f64> = u.iter().map(|v| (v - lse).exp()).collect();
        let mean: Vec<f64> = (0..p).map(|a| t.items.iter().zip(&pi).map(|(it, w)| w * it.x.0[a]).sum()).collect();
        for (item, w) in t.items.iter().zip(&pi) {
            for a in 0..p {
                let da = item.x.0[a] - mean[a];
                for b in 0..=a {
                    info[(a, b)] += w * da * (item.x.0[b] - mean[b]);
                }
            }
        }
    }
    let n = transactions.len() as f64;
    for a in 0..p {
        for b in 0..a {
            info[(b, a)] = info[(a, b)];
        }
    }
    Ok(info / n)
}

/// Fails unless the differences `x_j - x_chosen` span the feature space.
pub fn check_identifiable(transactions: &[ChoiceInstance], p: usize) -> Result<()> {
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rows = 0usize;
    for t in transactions {
        let c = chosen_index(t)?;
        let base = &t.items[c].x.0;
        for (j, item) in t.items.iter().enumerate() {
            if j == c {
                continue;
            }
            check_dim("item features", p, item.x.0.len())?;
            let diff: Vec<f64> = item.x.0.iter().zip(base).map(|(a, b)| a - b).collect();
            for r in 0..p {
                for s in 0..p {
                    gram[(r, s)] += diff[r] * diff[s];
                }
            }
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(CalibError::NonIdentifiable(
            "every assortment is a singleton, so the conditional likelihood is flat".into(),
        ));
    }
    let eig = SymmetricEigen::new(gram);
    let sv: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if max == 0.0 || min <= RANK_TOL * max {
        return Err(CalibError::NonIdentifiable(format!(
            "difference-feature design is rank deficient (singular values {min:e} / {max:e})"
        )));
    }
    Ok(())
}

/// Maximizes the conditional log-likelihood from zero by damped Newton
/// ascent with Armijo backtracking; falls back to the gradient direction
/// when the curvature is not usable.
pub fn fit_conditional_mnl(transactions: &[ChoiceInstance], opts: &MnlOptions) -> Result<UtilityModel> {
    let first = transactions
        .first()
        .ok_or_else(|| CalibError::Data("no transactions".into()))?;
    let p = first.item_dim();
    for t in transactions {
        t.validate()?;
        check_dim("item features", p, t.item_dim())?;
        chosen_index(t)?;
    }
    check_identifiable(transactions, p)?;

    let mut beta = vec![0.0; p];
    let mut f = conditional_log_likelihood(&beta, transactions)?;
    let mut grad = conditional_gradient(&beta, transactions)?;
    let mut trace = vec![f];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let gnorm2 = dot(&grad, &grad);
        if gnorm2.sqrt() <= opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let dir = information_matrix(&beta, transactions)?
            .cholesky()
            .map(|c| c.solve(&DVector::from_column_slice(&grad)).as_slice().to_vec())
            .filter(|d| d.iter().all(|v| v.is_finite()) && dot(d, &grad) > 0.0)
            .unwrap_or_else(|| grad.clone());
        let slope = dot(&dir, &grad);
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..60 {
            let cand: Vec<f64> = beta.iter().zip(&dir).map(|(b, d)| b + alpha * d).collect();
            let fc = conditional_log_likelihood(&cand, transactions)?;
            if !fc.is_finite() {
                alpha *= 0.5;
                continue;
            }
            if fc >= f + 1e-4 * alpha * slope {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            // no ascent left at machine precision
            converged = true;
            break;
        };
        beta = cand;
        f = fc;
        grad = conditional_gradient(&beta, transactions)?;
        trace.push(f);
    }
    if !f.is_finite() {
        return Err(CalibError::Data("non-finite conditional log-likelihood".into()));
    }
    let grad_norm = dot(&grad, &grad).sqrt();
    Ok(UtilityModel {
        beta_hat: beta,
        normalization: Normalization::None,
        fit_log: FitLog { iterations, objective: f, grad_norm, converged: converged || grad_norm <= opts.tol, trace },
    })
}

/// `s_hat_k = log sum_{i in S_k} exp(beta_hat . x_i)` for every instance.
pub fn inclusive_values(model: &UtilityModel, instances: &[ChoiceInstance]) -> Result<Vec<f64>> {
    instances
        .iter()
        .map(|inst| inclusive_value(&inside_utilities(&model.beta_hat, inst)?))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InclusiveErrorStats {
    /// Mean squared error.
    pub bar_tau: f64,
    /// Max absolute error.
    pub tau_s: f64,
}

pub fn inclusive_error_stats(s_hat: &[f64], s_true: &[f64]) -> Result<InclusiveErrorStats> {
    check_dim("inclusive values", s_true.len(), s_hat.len())?;
    if s_hat.is_empty() {
        return Ok(InclusiveErrorStats { bar_tau: 0.0, tau_s: 0.0 });
    }
    let mut sq = 0.0;
    let mut max = 0.0f64;
    for (a, b) in s_hat.iter().zip(s_true) {
        let e = a - b;
        sq += e * e;
        max = max.max(e.abs());
    }
    Ok(InclusiveErrorStats { bar_tau: sq / s_hat.len() as f64, tau_s: max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::{ContextFeatures, ItemFeatures, OfferedItem};
    use approx::assert_abs_diff_eq;

    fn item(id: u32, x: &[f64]) -> OfferedItem {
        OfferedItem { id, x: ItemFeatures(x.to_vec()), revenue: None }
    }

    fn tx(xs: &[&[f64]], chosen: usize) -> ChoiceInstance {
        ChoiceInstance {
            context: ContextFeatures(vec![]),
            items: xs.iter().enumerate().map(|(i, x)| item(i as u32, x)).collect(),
            chosen: Some(chosen),
        }
    }

    #[test]
    fn singleton_assortments_are_not_identifiable() {
        let data = vec![tx(&[&[1.0, 2.0]], 0), tx(&[&[0.5, -1.0]], 0)];
        assert!(matches!(
            fit_conditional_mnl(&data, &MnlOptions::default()),
            Err(CalibError::NonIdentifiable(_))
        ));
    }

    #[test]
    fn identical_items_are_not_identifiable() {
        let data: Vec<_> = (0..20).map(|k| tx(&[&[1.0, 2.0], &[1.0, 2.0]], k % 2)).collect();
        let g = conditional_gradient(&[0.3, -0.7], &data).unwrap();
        assert_abs_diff_eq!(g[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.0, epsilon = 1e-15);
        assert!(matches!(
            fit_conditional_mnl(&data, &MnlOptions::default()),
            Err(CalibError::NonIdentifiable(_))
        ));
    }

    #[test]
    fn missing_choice_is_a_data_error() {
        let mut t = tx(&[&[1.0], &[0.0]], 0);
        t.chosen = None;
        assert!(matches!(fit_conditional_mnl(&[t], &MnlOptions::default()), Err(CalibError::Data(_))));
    }

    #[test]
    fn fit_matches_closed_form_two_item_logit() {
        // one feature, items at x=1 and x=0: the MLE is the log odds of the
        // empirical split, here 30 vs 10.
        let mut data = Vec::new();
        for k in 0..40 {
            data.push(tx(&[&[1.0], &[0.0]], usize::from(k >= 30)));
        }
        let m = fit_conditional_mnl(&data, &MnlOptions::default()).unwrap();
        assert_abs_diff_eq!(m.beta_hat[0], 3f64.ln(), epsilon = 1e-7);
        assert!(m.fit_log.converged);
        assert!(m.fit_log.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn inclusive_values_examples() {
        let insts = vec![tx(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 2.0]], 0), tx(&[&[3.0, -1.0]], 0)];
        let zero = UtilityModel::from_beta(vec![0.0, 0.0]);
        let s = inclusive_values(&zero, &insts).unwrap();
        assert_abs_diff_eq!(s[0], 3f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], 0.0, epsilon = 1e-15);
        let m = UtilityModel::from_beta(vec![0.5, 2.0]);
        assert_abs_diff_eq!(inclusive_values(&m, &insts).unwrap()[1], 0.5 * 3.0 - 2.0, epsilon = 1e-15);
        assert!(inclusive_values(&UtilityModel::from_beta(vec![1.0]), &insts).is_err());
    }

    #[test]
    fn error_stats() {
        let s = [1.0, 2.0, 3.0];
        assert_eq!(inclusive_error_stats(&s, &s).unwrap(), InclusiveErrorStats { bar_tau: 0.0, tau_s: 0.0 });
        let st = inclusive_error_stats(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!((st.bar_tau, st.tau_s), (1.0, 1.0));
        let st = inclusive_error_stats(&[0.3, -0.4, 0.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(st.bar_tau, 0.25 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(st.tau_s, 0.4);
        assert!(st.bar_tau <= st.tau_s * st.tau_s);
        assert!(inclusive_error_stats(&[1.0], &[1.0, 2.0]).is_err());
    }
}
