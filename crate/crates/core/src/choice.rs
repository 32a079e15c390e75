//! Multinomial-logit primitives.
//!
//! Inside items carry linear utilities `u_i = beta . x_i`; the outside option
//! (no purchase) carries `u_0 = gamma . z(X)`. The log-odds of the outside
//! option then reduce to `gamma . z - s` where `s` is the inclusive value
//! (log-sum-exp) of the offered inside utilities.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, CalibError, Result};

/// Default clipping used when turning probabilities into log-odds.
pub const DEFAULT_CLIP_EPS: f64 = 1e-7;

/// Item attribute vector `x_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemFeatures(pub Vec<f64>);

/// Outside-option feature map `z(X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextFeatures(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfferedItem {
    pub id: u32,
    pub x: ItemFeatures,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revenue: Option<f64>,
}

/// One observed (context, assortment) pair.
///
/// `chosen` indexes into `items` when an inside purchase was recorded. An
/// outside choice is never recorded, so it is represented by `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceInstance {
    pub context: ContextFeatures,
    pub items: Vec<OfferedItem>,
    pub chosen: Option<usize>,
}

impl ChoiceInstance {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(CalibError::Data("instance offers no items".into()));
        }
        let mut ids: Vec<u32> = self.items.iter().map(|it| it.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(CalibError::Data("duplicate item id in assortment".into()));
        }
        if let Some(c) = self.chosen {
            if c >= self.items.len() {
                return Err(CalibError::Data(format!(
                    "chosen index {c} out of range for {} items",
                    self.items.len()
                )));
            }
        }
        let finite = self.context.0.iter().all(|v| v.is_finite())
            && self.items.iter().all(|it| it.x.0.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(CalibError::Data("non-finite feature value".into()));
        }
        Ok(())
    }

    pub fn item_dim(&self) -> usize {
        self.items.first().map_or(0, |it| it.x.0.len())
    }
}

/// Inside and outside utilities for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityProfile {
    pub inside: Vec<f64>,
    pub outside: f64,
}

/// Choice probabilities over the offered items plus the outside option.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceProbabilities {
    pub inside: Vec<f64>,
    pub outside: f64,
}

impl ChoiceProbabilities {
    /// Within-assortment shares `q_i = p_i / (1 - p_0)`.
    pub fn within_shares(&self) -> Vec<f64> {
        let inside_mass: f64 = self.inside.iter().sum();
        self.inside.iter().map(|p| p / inside_mass).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn inside_utilities(beta: &[f64], instance: &ChoiceInstance) -> Result<Vec<f64>> {
    instance
        .items
        .iter()
        .map(|it| {
            check_dim("item features", beta.len(), it.x.0.len())?;
            Ok(dot(beta, &it.x.0))
        })
        .collect()
}

/// `log(sum(exp(u)))` with a max shift.
pub fn inclusive_value(utilities: &[f64]) -> Result<f64> {
    if utilities.is_empty() {
        return Err(CalibError::Domain("inclusive value of an empty set".into()));
    }
    if utilities.iter().any(|u| !u.is_finite()) {
        return Err(CalibError::Domain("non-finite utility".into()));
    }
    Ok(log_sum_exp(utilities))
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn choice_probabilities(profile: &UtilityProfile) -> ChoiceProbabilities {
    let m = profile
        .inside
        .iter()
        .copied()
        .fold(profile.outside, f64::max);
    let inside: Vec<f64> = profile.inside.iter().map(|u| (u - m).exp()).collect();
    let outside = (profile.outside - m).exp();
    let total = inside.iter().sum::<f64>() + outside;
    ChoiceProbabilities {
        inside: inside.into_iter().map(|e| e / total).collect(),
        outside: outside / total,
    }
}

/// Outside log-odds `gamma . z - s`.
pub fn outside_logit_identity(gamma: &[f64], z: &ContextFeatures, s: f64) -> Result<f64> {
    check_dim("context features", gamma.len(), z.0.len())?;
    Ok(dot(gamma, &z.0) - s)
}

pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Log-odds of `p` after clipping it into `[clip_eps, 1 - clip_eps]`.
pub fn logit(p: f64, clip_eps: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CalibError::Domain(format!("probability {p} outside [0, 1]")));
    }
    if !(clip_eps > 0.0 && clip_eps < 0.5) {
        return Err(CalibError::Domain(format!("clip epsilon {clip_eps} outside (0, 0.5)")));
    }
    // work on the smaller tail so the clip boundary is represented exactly
    let (tail, sign) = if p > 0.5 { (1.0 - p, -1.0) } else { (p, 1.0) };
    let q = tail.max(clip_eps);
    Ok(sign * (q / (1.0 - q)).ln())
}
