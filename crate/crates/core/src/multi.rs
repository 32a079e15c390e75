//! Rank calibration from several predictors at once.
//!
//! Two aggregations of the predictors' pairwise orderings:
//!
//! * **pooled**: every predictor is a weighted judge of each pair, with a
//!   learned global orientation `o_m = +-1` so anti-monotone predictors get
//!   flipped instead of fighting the others;
//! * **consensus**: each pair is judged once by the sign of the median of the
//!   predictors' logit differences; pairs with a zero median are dropped.

use serde::{Deserialize, Serialize};

use crate::choice::{logistic, logit, DEFAULT_CLIP_EPS};
use crate::error::{check_dim, CalibError, Result};
use crate::mrc::{
    exact_concordance, finish_direction, minimize_on_sphere, sign, warm_start_theta, Design, MrcFit,
    MrcOptions, PairJudge,
};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiMode {
    Pooled,
    Consensus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiOptions {
    pub mode: MultiMode,
    /// Simplex weights for the pooled judges; uniform when absent.
    pub weights: Option<Vec<f64>>,
    pub mrc: MrcOptions,
    /// Cap on orientation/direction alternation rounds.
    pub max_rounds: usize,
}

impl Default for MultiOptions {
    fn default() -> Self {
        Self { mode: MultiMode::Pooled, weights: None, mrc: MrcOptions::default(), max_rounds: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledFit {
    pub fit: MrcFit,
    /// Global orientation of each predictor, signed so that the weighted
    /// majority is `+1`. `fit.objective_exact` is the pooled objective at these
    /// orientations, before `theta_hat` is sign-normalized.
    pub orientations: Vec<i8>,
    pub rounds: usize,
}

/// Per-predictor logit columns of an `n x M` matrix.
fn columns(y_matrix: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let m = y_matrix.first().map_or(0, Vec::len);
    if m == 0 {
        return Err(CalibError::Config("need at least one predictor".into()));
    }
    let mut cols = vec![Vec::with_capacity(y_matrix.len()); m];
    for row in y_matrix {
        check_dim("predictor count", m, row.len())?;
        for (c, v) in cols.iter_mut().zip(row) {
            if !v.is_finite() {
                return Err(CalibError::Data("non-finite predictor logit".into()));
            }
            c.push(*v);
        }
    }
    Ok(cols)
}

/// Pairwise signs `sign(y_k - y_l)` of each predictor, evaluated on demand.
#[derive(Debug, Clone)]
pub struct PairwiseSigns {
    cols: Vec<Vec<f64>>,
}

impl PairwiseSigns {
    pub fn new(y_matrix: &[Vec<f64>]) -> Result<Self> {
        Ok(Self { cols: columns(y_matrix)? })
    }

    pub fn num_predictors(&self) -> usize {
        self.cols.len()
    }

    pub fn len(&self) -> usize {
        self.cols[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sign(&self, m: usize, k: usize, l: usize) -> i8 {
        sign(self.cols[m][k] - self.cols[m][l]) as i8
    }

    /// Sign of the median of the predictors' differences `y_k - y_l`; for
    /// even `M` the median averages the two middle differences.
    pub fn median_sign(&self, k: usize, l: usize) -> i8 {
        let m = self.cols.len();
        let mut stack = [0.0f64; 16];
        let mut heap;
        let diffs: &mut [f64] = if m <= stack.len() {
            &mut stack[..m]
        } else {
            heap = vec![0.0; m];
            &mut heap
        };
        for (d, c) in diffs.iter_mut().zip(&self.cols) {
            *d = c[k] - c[l];
        }
        diffs.sort_unstable_by(f64::total_cmp);
        let med = if m % 2 == 1 { diffs[m / 2] } else { 0.5 * (diffs[m / 2 - 1] + diffs[m / 2]) };
        sign(med) as i8
    }
}

struct PooledJudge<'a> {
    signs: &'a PairwiseSigns,
    weights: &'a [f64],
    orient: &'a [i8],
}

impl PairJudge for PooledJudge<'_> {
    fn votes(&self, k: usize, l: usize) -> (f64, f64) {
        let (mut up, mut down) = (0.0, 0.0);
        for m in 0..self.weights.len() {
            match self.orient[m] * self.signs.sign(m, k, l) {
                1 => up += self.weights[m],
                -1 => down += self.weights[m],
                _ => {}
            }
        }
        (up, down)
    }
}

struct ConsensusJudge<'a> {
    signs: &'a PairwiseSigns,
}

impl PairJudge for ConsensusJudge<'_> {
    fn votes(&self, k: usize, l: usize) -> (f64, f64) {
        match self.signs.median_sign(k, l) {
            1 => (1.0, 0.0),
            -1 => (0.0, 1.0),
            _ => (0.0, 0.0),
        }
    }
}

fn resolve_weights(weights: Option<&[f64]>, m: usize) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0 / m as f64; m]),
        Some(w) => {
            check_dim("weights", m, w.len())?;
            let total: f64 = w.iter().sum();
            if w.iter().any(|v| v.is_nan() || *v < 0.0) || (total - 1.0).abs() > 1e-12 {
                return Err(CalibError::Config("weights must be nonnegative and sum to 1".into()));
            }
            Ok(w.to_vec())
        }
    }
}

/// Per predictor, concordant minus discordant pair counts against `scores`.
fn net_agreement(signs: &PairwiseSigns, scores: &[f64]) -> Vec<i64> {
    let n = scores.len();
    let row = |k: usize| -> Vec<i64> {
        let mut acc = vec![0i64; signs.num_predictors()];
        for l in k + 1..n {
            let ds = sign(scores[k] - scores[l]) as i64;
            if ds == 0 {
                continue;
            }
            for (m, a) in acc.iter_mut().enumerate() {
                *a += ds * i64::from(signs.sign(m, k, l));
            }
        }
        acc
    };
    let add = |mut a: Vec<i64>, b: Vec<i64>| {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        a
    };
    #[cfg(feature = "parallel")]
    let out = (0..n).into_par_iter().map(row).reduce(|| vec![0; signs.num_predictors()], add);
    #[cfg(not(feature = "parallel"))]
    let out = (0..n).map(row).fold(vec![0; signs.num_predictors()], add);
    out
}

/// Pooled objective
/// `(2 / (n (n - 1))) sum_{k<l} sum_m pi_m 1{o_m s_kl^(m) (theta . w_k - theta . w_l) > 0}`.
pub fn pooled_objective_exact(
    theta: &[f64],
    w: &[Vec<f64>],
    y_matrix: &[Vec<f64>],
    weights: &[f64],
    orient: &[i8],
) -> Result<f64> {
    let cols = columns(y_matrix)?;
    check_dim("weights", cols.len(), weights.len())?;
    check_dim("orientations", cols.len(), orient.len())?;
    let scores = Design::from_rows(w).scores(theta);
    Ok(pooled_from_scores(&cols, &scores, weights, orient))
}

fn pooled_from_scores(cols: &[Vec<f64>], scores: &[f64], weights: &[f64], orient: &[i8]) -> f64 {
    cols.iter()
        .zip(weights)
        .zip(orient)
        .map(|((c, wgt), o)| {
            let oriented: Vec<f64> = c.iter().map(|v| f64::from(*o) * v).collect();
            wgt * exact_concordance(scores, &oriented)
        })
        .sum()
}

/// Consensus objective: the share of pairs with a nonzero median sign that
/// the index orders the same way.
pub fn consensus_objective_exact(theta: &[f64], w: &[Vec<f64>], y_matrix: &[Vec<f64>]) -> Result<f64> {
    let signs = PairwiseSigns::new(y_matrix)?;
    let scores = Design::from_rows(w).scores(theta);
    consensus_from_scores(&signs, &scores)
}

fn consensus_from_scores(signs: &PairwiseSigns, scores: &[f64]) -> Result<f64> {
    let n = scores.len();
    let row = |k: usize| -> (u64, u64) {
        let mut hit = 0;
        let mut kept = 0;
        for l in k + 1..n {
            let s = signs.median_sign(k, l);
            if s == 0 {
                continue;
            }
            kept += 1;
            if f64::from(s) * (scores[k] - scores[l]) > 0.0 {
                hit += 1;
            }
        }
        (hit, kept)
    };
    #[cfg(feature = "parallel")]
    let (hit, kept) = (0..n).into_par_iter().map(row).reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    #[cfg(not(feature = "parallel"))]
    let (hit, kept) = (0..n).map(row).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if kept == 0 {
        return Err(CalibError::NoRankInformation);
    }
    Ok(hit as f64 / kept as f64)
}

fn prepare(z: &[Vec<f64>], s_hat: &[f64], y_matrix: &[Vec<f64>], opts: &MrcOptions) -> Result<(Design, PairwiseSigns)> {
    let design = Design::from_parts(z, s_hat)?;
    check_dim("predictor rows", design.n, y_matrix.len())?;
    if design.n < design.dim + 1 {
        return Err(CalibError::Config(format!("need at least d + 2 = {} samples", design.dim + 1)));
    }
    if opts.max_pairs_per_eval == 0 {
        return Err(CalibError::Config("max_pairs_per_eval must be at least 1".into()));
    }
    Ok((design, PairwiseSigns::new(y_matrix)?))
}

/// Pooled fit: alternate exact orientation updates with surrogate steps on
/// the orientation-corrected pairs until no orientation flips.
///
/// The warm start uses the first predictor's logits and the orientations are
/// updated once at the warm start before the first surrogate pass.
pub fn fit_pooled(z: &[Vec<f64>], s_hat: &[f64], y_matrix: &[Vec<f64>], opts: &MultiOptions) -> Result<PooledFit> {
    let (design, signs) = prepare(z, s_hat, y_matrix, &opts.mrc)?;
    let m = signs.num_predictors();
    let weights = resolve_weights(opts.weights.as_deref(), m)?;
    if signs.cols.iter().all(|c| c.iter().all(|v| *v == c[0])) {
        return Err(CalibError::NoRankInformation);
    }

    let reference = &signs.cols[0];
    let (mut theta, used) = warm_start_theta(&design, z, s_hat, reference, &opts.mrc)?;
    let mut orient = vec![1i8; m];
    let mut log = None;
    let mut rounds = 0;
    let update = |theta: &[f64], orient: &mut [i8]| -> bool {
        let agree = net_agreement(&signs, &design.scores(theta));
        let mut flipped = false;
        for (o, a) in orient.iter_mut().zip(agree) {
            let want = match a.signum() {
                1 => 1,
                -1 => -1,
                _ => *o,
            };
            flipped |= want != *o;
            *o = want;
        }
        flipped
    };
    update(&theta, &mut orient);
    while rounds < opts.max_rounds.max(1) {
        rounds += 1;
        let judge = PooledJudge { signs: &signs, weights: &weights, orient: &orient };
        let mut mrc = opts.mrc.clone();
        if rounds > 1 {
            mrc.seed = crate::rng::derive_seed(opts.mrc.seed, rounds as u64);
        }
        let (next, round_log) = minimize_on_sphere(theta, &design, &judge, &mrc);
        theta = next;
        log = Some(round_log);
        if !update(&theta, &mut orient) {
            break;
        }
    }
    // (theta, o) and (-theta, -o) score the same; keep the weighted majority positive
    let lean: f64 = weights.iter().zip(&orient).map(|(w, o)| w * f64::from(*o)).sum();
    if lean < 0.0 || (lean == 0.0 && orient[0] < 0) {
        theta.iter_mut().for_each(|t| *t = -*t);
        orient.iter_mut().for_each(|o| *o = -*o);
    }
    let objective_exact = pooled_from_scores(&signs.cols, &design.scores(&theta), &weights, &orient);
    let (theta_hat, gamma_hat) = finish_direction(theta, opts.mrc.slope_threshold)?;
    let mut optimizer_log = log.expect("at least one round");
    optimizer_log.warm_start_used = used;
    Ok(PooledFit {
        fit: MrcFit { theta_hat, gamma_hat, objective_exact, optimizer_log },
        orientations: orient,
        rounds,
    })
}

/// Consensus fit on the median-sign pairs.
pub fn fit_consensus(z: &[Vec<f64>], s_hat: &[f64], y_matrix: &[Vec<f64>], opts: &MultiOptions) -> Result<MrcFit> {
    let (design, signs) = prepare(z, s_hat, y_matrix, &opts.mrc)?;
    // median logit per row drives the least-squares warm start
    let median_y: Vec<f64> = (0..design.n)
        .map(|k| {
            let mut v: Vec<f64> = signs.cols.iter().map(|c| c[k]).collect();
            v.sort_by(f64::total_cmp);
            let m = v.len();
            if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) }
        })
        .collect();
    let (theta0, used) = warm_start_theta(&design, z, s_hat, &median_y, &opts.mrc)?;
    // fails with NoRankInformation when every median sign is zero
    consensus_from_scores(&signs, &design.scores(&theta0))?;
    let judge = ConsensusJudge { signs: &signs };
    let (theta, mut log) = minimize_on_sphere(theta0, &design, &judge, &opts.mrc);
    log.warm_start_used = used;
    let (theta_hat, gamma_hat) = finish_direction(theta, opts.mrc.slope_threshold)?;
    let objective_exact = consensus_from_scores(&signs, &design.scores(&theta_hat))?;
    Ok(MrcFit { theta_hat, gamma_hat, objective_exact, optimizer_log: log })
}

/// Averages the predictors' probabilities and maps the mean back to a logit.
pub fn logit_mean_baseline(y_matrix: &[Vec<f64>]) -> Result<Vec<f64>> {
    let cols = columns(y_matrix)?;
    y_matrix
        .iter()
        .map(|row| {
            let p = row.iter().map(|y| logistic(*y)).sum::<f64>() / cols.len() as f64;
            logit(p, DEFAULT_CLIP_EPS)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn signs() {
        let s = PairwiseSigns::new(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(s.sign(0, 0, 1), 0);
        let s = PairwiseSigns::new(&[vec![2.0], vec![1.0]]).unwrap();
        assert_eq!(s.sign(0, 0, 1), 1);
        assert_eq!(s.sign(0, 1, 0), -1);
    }

    #[test]
    fn median_signs() {
        // differences (+2, +1, +3, -1, -2)
        let y = vec![vec![2.0, 1.0, 3.0, -1.0, -2.0], vec![0.0; 5]];
        assert_eq!(PairwiseSigns::new(&y).unwrap().median_sign(0, 1), 1);
        let y = vec![vec![1.0, -1.0], vec![0.0, 0.0]];
        assert_eq!(PairwiseSigns::new(&y).unwrap().median_sign(0, 1), 0);
        let y = vec![vec![1.0, -0.5], vec![0.0, 0.0]];
        assert_eq!(PairwiseSigns::new(&y).unwrap().median_sign(0, 1), 1);
    }

    #[test]
    fn logit_mean_examples() {
        let y = vec![vec![0.3], vec![-1.2]];
        let out = logit_mean_baseline(&y).unwrap();
        assert_abs_diff_eq!(out[0], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], -1.2, epsilon = 1e-12);
        let l = |p: f64| (p / (1.0 - p)).ln();
        let out = logit_mean_baseline(&[vec![l(0.2), l(0.8)]]).unwrap();
        assert_abs_diff_eq!(out[0], 0.0, epsilon = 1e-12);
        let out = logit_mean_baseline(&[vec![l(0.9), l(0.9), l(0.3)]]).unwrap();
        assert_abs_diff_eq!(out[0], (0.7f64 / 0.3).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(out[0], 0.847298, epsilon = 1e-6);
    }

    #[test]
    fn weights_must_be_a_simplex() {
        assert!(resolve_weights(Some(&[0.5, 0.6]), 2).is_err());
        assert!(resolve_weights(Some(&[-0.5, 1.5]), 2).is_err());
        assert_eq!(resolve_weights(None, 4).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn all_tied_predictors() {
        let z: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.3]).collect();
        let s: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let y = vec![vec![1.0, 2.0]; 8];
        let opts = MultiOptions::default();
        assert_eq!(fit_pooled(&z, &s, &y, &opts).unwrap_err(), CalibError::NoRankInformation);
        assert_eq!(fit_consensus(&z, &s, &y, &opts).unwrap_err(), CalibError::NoRankInformation);
        // opposite predictors cancel for even M
        let y: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, -(i as f64)]).collect();
        assert_eq!(fit_consensus(&z, &s, &y, &opts).unwrap_err(), CalibError::NoRankInformation);
    }

    #[test]
    fn majority_sign_wins() {
        // randomized enumeration of strict majorities for M = 3 and 5
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for m in [3usize, 5] {
            for _ in 0..2000 {
                let majority = m.div_ceil(2);
                let dir = if next() > 0.0 { 1.0 } else { -1.0 };
                let diffs: Vec<f64> = (0..m)
                    .map(|i| if i < majority { dir * (next().abs() + 1e-3) } else { 10.0 * next() })
                    .collect();
                let y: Vec<Vec<f64>> = vec![diffs, vec![0.0; m]];
                assert_eq!(PairwiseSigns::new(&y).unwrap().median_sign(0, 1), dir as i8);
            }
        }
    }
}
