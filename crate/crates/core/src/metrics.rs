//! Evaluation metrics for outside-option probabilities.

use serde::{Deserialize, Serialize};

use crate::choice::{inside_utilities, ChoiceInstance, DEFAULT_CLIP_EPS};
use crate::error::{check_dim, CalibError, Result};

pub const DEFAULT_BINS: usize = 10;

/// q-quantile of `|p_true - p_hat|`, interpolating linearly between order
/// statistics at index `q (n - 1)`.
pub fn error_quantile(p_true: &[f64], p_hat: &[f64], q: f64) -> Result<f64> {
    check_dim("prediction length", p_true.len(), p_hat.len())?;
    if p_true.is_empty() {
        return Err(CalibError::Data("no predictions to evaluate".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(CalibError::Domain(format!("quantile level {q} outside (0, 1)")));
    }
    let mut e: Vec<f64> = p_true.iter().zip(p_hat).map(|(a, b)| (a - b).abs()).collect();
    if e.iter().any(|v| v.is_nan()) {
        return Err(CalibError::Data("NaN prediction".into()));
    }
    e.sort_by(f64::total_cmp);
    Ok(interpolated(&e, q))
}

fn interpolated(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    match sorted.get(lo + 1) {
        Some(hi) if frac > 0.0 => sorted[lo] + frac * (hi - sorted[lo]),
        _ => sorted[lo],
    }
}

/// Mean negative log-likelihood with predictions clipped to `[eps, 1 - eps]`.
pub fn nll(labels: &[bool], p_hat: &[f64], clip_eps: f64) -> Result<f64> {
    check_dim("prediction length", labels.len(), p_hat.len())?;
    if labels.is_empty() {
        return Err(CalibError::Data("no predictions to evaluate".into()));
    }
    let total: f64 = labels
        .iter()
        .zip(p_hat)
        .map(|(&b, &p)| {
            let p = p.clamp(clip_eps, 1.0 - clip_eps);
            if b { -p.ln() } else { -(-p).ln_1p() }
        })
        .sum();
    Ok(total / labels.len() as f64)
}

pub fn nll_default(labels: &[bool], p_hat: &[f64]) -> Result<f64> {
    nll(labels, p_hat, DEFAULT_CLIP_EPS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean predicted probability; 0 for an empty bin.
    pub mean_confidence: f64,
    /// Empirical frequency of the event; 0 for an empty bin.
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
}

impl ReliabilityTable {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// ECE recomputed from the bin rows.
    pub fn recompute_ece(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        self.bins
            .iter()
            .map(|b| b.count as f64 / n * (b.mean_accuracy - b.mean_confidence).abs())
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lower,bin_upper,count,conf,acc\n");
        for b in &self.bins {
            out.push_str(&format!("{},{},{},{},{}\n", b.lower, b.upper, b.count, b.mean_confidence, b.mean_accuracy));
        }
        out
    }
}

/// Equal-width reliability bins over `[0, 1]`, right-open except the last.
pub fn ece_reliability(labels: &[bool], p_hat: &[f64], m_bins: usize) -> Result<ReliabilityTable> {
    check_dim("prediction length", labels.len(), p_hat.len())?;
    if m_bins == 0 {
        return Err(CalibError::Config("need at least one bin".into()));
    }
    if p_hat.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(CalibError::Domain("probabilities must lie in [0, 1]".into()));
    }
    let mut count = vec![0usize; m_bins];
    let mut conf = vec![0.0; m_bins];
    let mut hits = vec![0.0; m_bins];
    for (&b, &p) in labels.iter().zip(p_hat) {
        let k = ((p * m_bins as f64).floor() as usize).min(m_bins - 1);
        count[k] += 1;
        conf[k] += p;
        hits[k] += if b { 1.0 } else { 0.0 };
    }
    let bins: Vec<ReliabilityBin> = (0..m_bins)
        .map(|k| {
            let c = count[k];
            let mean = |s: f64| if c == 0 { 0.0 } else { s / c as f64 };
            ReliabilityBin {
                lower: k as f64 / m_bins as f64,
                upper: (k + 1) as f64 / m_bins as f64,
                count: c,
                mean_confidence: mean(conf[k]),
                mean_accuracy: mean(hits[k]),
            }
        })
        .collect();
    let mut table = ReliabilityTable { bins, ece: 0.0 };
    table.ece = table.recompute_ece();
    Ok(table)
}

fn within_shares(beta: &[f64], inst: &ChoiceInstance) -> Result<Vec<f64>> {
    let u = inside_utilities(beta, inst)?;
    let top = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

/// `max_S sum_{i in S} |q_hat_i - q_i|` over the assortments of `instances`,
/// where `q` are within-assortment shares.
pub fn share_error_eps_q(beta_true: &[f64], beta_fitted: &[f64], instances: &[ChoiceInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(CalibError::Data("no assortments to evaluate".into()));
    }
    let mut worst = 0.0f64;
    for inst in instances {
        let (q, qh) = (within_shares(beta_true, inst)?, within_shares(beta_fitted, inst)?);
        worst = worst.max(q.iter().zip(&qh).map(|(a, b)| (a - b).abs()).sum());
    }
    Ok(worst)
}

/// Same L1 gap for explicit share vectors.
pub fn share_gap(q_true: &[f64], q_hat: &[f64]) -> Result<f64> {
    check_dim("share length", q_true.len(), q_hat.len())?;
    Ok(q_true.iter().zip(q_hat).map(|(a, b)| (a - b).abs()).sum())
}
