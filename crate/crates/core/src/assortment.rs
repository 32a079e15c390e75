//! Expected revenue and optimal assortments under an MNL model.

use rand::Rng as _;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::choice::{dot, ContextFeatures, ItemFeatures};
use crate::datagen::World;
use crate::error::{check_dim, CalibError, Result};
use crate::rng::Rng;

/// Largest candidate set accepted by [`AssortmentMethod::BruteForce`].
pub const BRUTE_FORCE_MAX: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u32,
    pub x: ItemFeatures,
    pub revenue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionInstance {
    pub context: ContextFeatures,
    pub candidates: Vec<Candidate>,
}

impl DecisionInstance {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(CalibError::Data("decision instance has no candidates".into()));
        }
        if self.candidates.iter().any(|c| !c.revenue.is_finite() || c.revenue <= 0.0) {
            return Err(CalibError::Data("candidate revenues must be positive and finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssortmentDecision {
    /// Candidate indices in increasing order.
    pub selected: Vec<usize>,
    pub expected_revenue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssortmentMethod {
    RevenueOrdered,
    BruteForce,
}

/// Outside and inside parameters of an MNL model.
#[derive(Debug, Clone, Copy)]
pub struct MnlParams<'a> {
    pub gamma: &'a [f64],
    pub beta: &'a [f64],
}

/// Attraction weights `exp(u - c)` for every candidate and the outside option,
/// shifted by the common maximum.
struct Weights {
    inside: Vec<f64>,
    outside: f64,
    revenue: Vec<f64>,
}

impl Weights {
    fn new(inst: &DecisionInstance, params: MnlParams) -> Result<Self> {
        inst.validate()?;
        check_dim("context features", params.gamma.len(), inst.context.0.len())?;
        let u0 = dot(params.gamma, &inst.context.0);
        let mut u = Vec::with_capacity(inst.candidates.len());
        for c in &inst.candidates {
            check_dim("item features", params.beta.len(), c.x.0.len())?;
            u.push(dot(params.beta, &c.x.0));
        }
        let shift = u.iter().copied().fold(u0, f64::max);
        if !shift.is_finite() {
            return Err(CalibError::Data("non-finite utility".into()));
        }
        Ok(Self {
            inside: u.iter().map(|v| (v - shift).exp()).collect(),
            outside: (u0 - shift).exp(),
            revenue: inst.candidates.iter().map(|c| c.revenue).collect(),
        })
    }

    /// `R(S)` for increasing candidate indices; summation order is fixed so
    /// equal sets give bit-identical revenues.
    fn revenue_of(&self, subset: impl Iterator<Item = usize>) -> f64 {
        let (mut num, mut den) = (0.0, self.outside);
        for i in subset {
            num += self.revenue[i] * self.inside[i];
            den += self.inside[i];
        }
        num / den
    }
}

fn checked_subset(subset: &[usize], m: usize) -> Result<Vec<usize>> {
    if subset.is_empty() {
        return Err(CalibError::Domain("assortment must be nonempty".into()));
    }
    let mut s = subset.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.len() != subset.len() || s[s.len() - 1] >= m {
        return Err(CalibError::Domain("assortment must list distinct candidate indices".into()));
    }
    Ok(s)
}

/// `R(X, S) = sum_{i in S} r_i p_i(X, S)` under the model `params`.
pub fn expected_revenue(inst: &DecisionInstance, subset: &[usize], params: MnlParams) -> Result<f64> {
    let subset = checked_subset(subset, inst.candidates.len())?;
    Ok(Weights::new(inst, params)?.revenue_of(subset.into_iter()))
}

/// `true` when `a` should replace the incumbent `b` of equal revenue.
fn preferred_on_tie(inst: &DecisionInstance, a: &[usize], b: &[usize]) -> bool {
    if a.len() != b.len() {
        return a.len() < b.len();
    }
    let ids = |s: &[usize]| {
        let mut v: Vec<u32> = s.iter().map(|&i| inst.candidates[i].id).collect();
        v.sort_unstable();
        v
    };
    ids(a) < ids(b)
}

fn better(inst: &DecisionInstance, rev: f64, set: &[usize], best: &Option<(f64, Vec<usize>)>) -> bool {
    match best {
        None => true,
        Some((r, s)) => rev > *r || (rev == *r && preferred_on_tie(inst, set, s)),
    }
}

/// Revenue-maximizing assortment under `params`. Ties go to the smaller set,
/// then to the lexicographically smaller sorted item ids.
pub fn optimal_assortment(
    inst: &DecisionInstance,
    params: MnlParams,
    method: AssortmentMethod,
) -> Result<AssortmentDecision> {
    let w = Weights::new(inst, params)?;
    let m = inst.candidates.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    match method {
        AssortmentMethod::RevenueOrdered => {
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| {
                let (ca, cb) = (&inst.candidates[a], &inst.candidates[b]);
                cb.revenue.total_cmp(&ca.revenue).then(ca.id.cmp(&cb.id))
            });
            for k in 1..=m {
                let mut set = order[..k].to_vec();
                set.sort_unstable();
                let rev = w.revenue_of(set.iter().copied());
                if better(inst, rev, &set, &best) {
                    best = Some((rev, set));
                }
            }
        }
        AssortmentMethod::BruteForce => {
            if m > BRUTE_FORCE_MAX {
                return Err(CalibError::Config(format!(
                    "brute force is limited to {BRUTE_FORCE_MAX} candidates, got {m}"
                )));
            }
            for mask in 1u32..(1u32 << m) {
                let set: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
                let rev = w.revenue_of(set.iter().copied());
                if better(inst, rev, &set, &best) {
                    best = Some((rev, set));
                }
            }
        }
    }
    let (expected_revenue, selected) = best.expect("at least one candidate");
    Ok(AssortmentDecision { selected, expected_revenue })
}

/// True-model revenue lost by optimizing under `fitted` instead of `truth`.
pub fn revenue_gap(
    inst: &DecisionInstance,
    truth: MnlParams,
    fitted: MnlParams,
    method: AssortmentMethod,
) -> Result<f64> {
    let best = optimal_assortment(inst, truth, method)?;
    let plug_in = optimal_assortment(inst, fitted, method)?;
    let achieved = expected_revenue(inst, &plug_in.selected, truth)?;
    Ok(best.expected_revenue - achieved)
}

/// Mean relative revenue gap `100 (R(S*) - R(S_hat)) / R(S*)`, both revenues
/// evaluated under the true model.
pub fn suboptimality(
    instances: &[DecisionInstance],
    truth: MnlParams,
    fitted: MnlParams,
    method: AssortmentMethod,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(CalibError::Config("no decision instances".into()));
    }
    let mut total = 0.0;
    for inst in instances {
        let best = optimal_assortment(inst, truth, method)?;
        let plug_in = optimal_assortment(inst, fitted, method)?;
        let achieved = expected_revenue(inst, &plug_in.selected, truth)?;
        total += 100.0 * (best.expected_revenue - achieved) / best.expected_revenue;
    }
    Ok(total / instances.len() as f64)
}

/// `max_S |R(X, S) - R_hat(X, S)|` over every nonempty subset.
pub fn max_revenue_error(inst: &DecisionInstance, truth: MnlParams, fitted: MnlParams) -> Result<f64> {
    let m = inst.candidates.len();
    if m > BRUTE_FORCE_MAX {
        return Err(CalibError::Config(format!("subset enumeration is limited to {BRUTE_FORCE_MAX} candidates")));
    }
    let (wt, wf) = (Weights::new(inst, truth)?, Weights::new(inst, fitted)?);
    let mut worst = 0.0f64;
    for mask in 1u32..(1u32 << m) {
        let set = || (0..m).filter(move |i| mask >> i & 1 == 1);
        worst = worst.max((wt.revenue_of(set()) - wf.revenue_of(set())).abs());
    }
    Ok(worst)
}

/// Draws decision instances from a synthetic world: a fresh context and
/// `m_cand` pool items with revenues uniform on `[lo, hi]`.
pub fn draw_decision_instances(
    world: &World,
    count: usize,
    m_cand: usize,
    revenue_range: (f64, f64),
    rng: &mut Rng,
) -> Result<Vec<DecisionInstance>> {
    let (lo, hi) = revenue_range;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(CalibError::Config("revenue range must satisfy 0 < lo <= hi".into()));
    }
    if m_cand == 0 || m_cand > world.pool.len() {
        return Err(CalibError::Config(format!("m_cand must be in 1..={}", world.pool.len())));
    }
    (0..count)
        .map(|_| {
            let context = world.draw_context(rng);
            let mut picks = index::sample(rng, world.pool.len(), m_cand).into_vec();
            picks.sort_unstable();
            let candidates = picks
                .into_iter()
                .map(|i| Candidate {
                    id: i as u32,
                    x: world.pool[i].clone(),
                    revenue: if hi > lo { rng.random_range(lo..=hi) } else { lo },
                })
                .collect();
            Ok(DecisionInstance { context, candidates })
        })
        .collect()
}
