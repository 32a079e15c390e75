//! Maximum-rank-correlation calibration.
//!
//! When the predictor is only monotone in the true outside logit, its ranks
//! still carry the direction of `[gamma, -1]`. The fit maximizes pairwise
//! concordance between `y` and the index `theta . w` with `w = [z, s_hat]`
//! over the unit sphere, then rescales so the inclusive-value coefficient is
//! `-1`.
//!
//! The indicator objective is piecewise constant, so the optimizer works on a
//! softplus surrogate of the pairwise margins with a limited-memory
//! quasi-Newton method. Large problems draw a fresh uniform subsample of pairs
//! at every iteration; the sample is fixed within an iteration so line search
//! and curvature pairs see a deterministic function.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, CalibError, Result};
use crate::linear::{ols_coefficients, DEFAULT_RIDGE, DEFAULT_SLOPE_THRESHOLD};
use crate::rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    /// Normalized least-squares direction `[theta_z, theta_s]`.
    Ols,
    Random,
    Provided(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrcOptions {
    /// Multiplies the pairwise margin inside the softplus.
    pub surrogate_temp: f64,
    /// Continuation multipliers applied to `surrogate_temp`, one optimizer
    /// stage each; later stages sharpen the surrogate toward the indicator.
    pub anneal: Vec<f64>,
    pub max_pairs_per_eval: usize,
    /// Iterations per annealing stage.
    pub max_iter: usize,
    /// Stage stops when the tangent gradient norm, or the relative decrease
    /// of an accepted step, falls below this.
    pub tol: f64,
    pub warm_start: WarmStart,
    pub slope_threshold: f64,
    /// L-BFGS memory.
    pub memory: usize,
    pub seed: u64,
}

impl Default for MrcOptions {
    fn default() -> Self {
        Self {
            surrogate_temp: 1.0,
            anneal: vec![1.0, 10.0, 100.0],
            max_pairs_per_eval: 200_000,
            max_iter: 100,
            tol: 1e-7,
            warm_start: WarmStart::Ols,
            slope_threshold: DEFAULT_SLOPE_THRESHOLD,
            memory: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerLog {
    pub iterations: usize,
    /// Surrogate value at the start of every iteration, on that iteration's pairs.
    pub surrogate_values: Vec<f64>,
    pub pairs_per_eval: usize,
    pub warm_start_used: String,
    pub converged: bool,
    /// Surrogate evaluations including line-search trials.
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrcFit {
    /// Unit vector `[theta_z, theta_s]` with `theta_s < 0`.
    pub theta_hat: Vec<f64>,
    pub gamma_hat: Vec<f64>,
    /// Exact rank objective at `theta_hat`, in `[0, 1]`.
    pub objective_exact: f64,
    pub optimizer_log: OptimizerLog,
}

/// Row-major `n x dim` regressor matrix.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Design {
    pub fn from_parts(z: &[Vec<f64>], s_hat: &[f64]) -> Result<Self> {
        let n = z.len();
        check_dim("s_hat length", n, s_hat.len())?;
        let d = z.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * (d + 1));
        for (zi, si) in z.iter().zip(s_hat) {
            check_dim("context features", d, zi.len())?;
            data.extend_from_slice(zi);
            data.push(*si);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CalibError::Data("non-finite regressor".into()));
        }
        Ok(Self { n, dim: d + 1, data })
    }

    pub fn from_rows(w: &[Vec<f64>]) -> Self {
        let dim = w.first().map_or(0, Vec::len);
        Self { n: w.len(), dim, data: w.iter().flatten().copied().collect() }
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn scores(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|k| self.row(k).iter().zip(theta).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Source of pairwise ordering information.
pub(crate) trait PairJudge: Sync {
    /// Total weight voting for `k` above `l` and for `l` above `k`, `k < l`.
    fn votes(&self, k: usize, l: usize) -> (f64, f64);
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) struct SingleJudge<'a> {
    pub y: &'a [f64],
}

impl PairJudge for SingleJudge<'_> {
    fn votes(&self, k: usize, l: usize) -> (f64, f64) {
        let d = self.y[k] - self.y[l];
        if d > 0.0 {
            (1.0, 0.0)
        } else if d < 0.0 {
            (0.0, 1.0)
        } else {
            (0.0, 0.0)
        }
    }
}

pub(crate) fn total_pairs(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Maps a linear index over `{(k, l) : k < l}` in lexicographic order back to the pair.
pub(crate) fn decode_pair(t: usize, n: usize) -> (usize, usize) {
    let offset = |k: usize| k * (2 * n - k - 1) / 2;
    let b = (2 * n - 1) as f64;
    let mut k = ((b - (b * b - 8.0 * t as f64).max(0.0).sqrt()) / 2.0).floor() as usize;
    k = k.min(n - 2);
    while k > 0 && offset(k) > t {
        k -= 1;
    }
    while k + 1 < n - 1 && offset(k + 1) <= t {
        k += 1;
    }
    (k, k + 1 + t - offset(k))
}

/// All pairs when there are at most `max_pairs`, otherwise a uniform sample
/// without replacement drawn from the `(seed, iteration)` stream.
pub(crate) fn draw_pairs(n: usize, max_pairs: usize, seed: u64, iteration: u64) -> Vec<(u32, u32)> {
    let total = total_pairs(n);
    if total <= max_pairs {
        let mut out = Vec::with_capacity(total);
        for k in 0..n {
            for l in k + 1..n {
                out.push((k as u32, l as u32));
            }
        }
        return out;
    }
    let mut rng = rng::stream(rng::derive_seed(seed, iteration), rng::STREAM_OPTIMIZER);
    let mut picks = index::sample(&mut rng, total, max_pairs).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|t| {
            let (k, l) = decode_pair(t, n);
            (k as u32, l as u32)
        })
        .collect()
}

const CHUNK: usize = 16_384;

struct Partial {
    value: f64,
    count: f64,
    coef: Vec<(u32, f64)>,
}

fn surrogate_chunk<J: PairJudge>(pairs: &[(u32, u32)], scores: &[f64], judge: &J, temp: f64) -> Partial {
    let mut value = 0.0;
    let mut count = 0.0;
    let mut coef = Vec::with_capacity(pairs.len() * 2);
    for &(k, l) in pairs {
        let (k, l) = (k as usize, l as usize);
        let (up, down) = judge.votes(k, l);
        if up + down <= 0.0 {
            continue;
        }
        count += 1.0;
        let x = temp * (scores[k] - scores[l]);
        // softplus(-x), softplus(x) and their logistics share e = exp(-|x|)
        let e = (-x.abs()).exp();
        let (sp_neg, lg_neg) = if x > 0.0 { (e.ln_1p(), e / (1.0 + e)) } else { (-x + e.ln_1p(), 1.0 / (1.0 + e)) };
        value += up * sp_neg + down * (sp_neg + x);
        let dk = temp * (down * (1.0 - lg_neg) - up * lg_neg);
        if dk != 0.0 {
            coef.push((k as u32, dk));
            coef.push((l as u32, -dk));
        }
    }
    Partial { value, count, coef }
}

/// Mean surrogate loss `softplus(-sign * temp * theta . (w_k - w_l))` and its
/// gradient in `theta`, averaged over the pairs that carry a nonzero sign.
pub(crate) fn surrogate<J: PairJudge>(
    theta: &[f64],
    design: &Design,
    pairs: &[(u32, u32)],
    judge: &J,
    temp: f64,
) -> (f64, Vec<f64>) {
    let scores = design.scores(theta);
    #[cfg(feature = "parallel")]
    let parts: Vec<Partial> = pairs
        .par_chunks(CHUNK)
        .map(|c| surrogate_chunk(c, &scores, judge, temp))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Partial> = pairs
        .chunks(CHUNK)
        .map(|c| surrogate_chunk(c, &scores, judge, temp))
        .collect();

    let mut value = 0.0;
    let mut count = 0.0;
    let mut per_row = vec![0.0; design.n];
    for p in &parts {
        value += p.value;
        count += p.count;
        for &(k, c) in &p.coef {
            per_row[k as usize] += c;
        }
    }
    let count = count.max(1.0);
    let mut grad = vec![0.0; design.dim];
    for (k, c) in per_row.iter().enumerate() {
        if *c != 0.0 {
            for (g, w) in grad.iter_mut().zip(design.row(k)) {
                *g += c * w;
            }
        }
    }
    grad.iter_mut().for_each(|g| *g /= count);
    (value / count, grad)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

fn tangent(g: &[f64], theta: &[f64]) -> Vec<f64> {
    let r = dotp(g, theta);
    g.iter().zip(theta).map(|(gi, ti)| gi - r * ti).collect()
}

/// Minimizes the pair surrogate over the unit sphere, one L-BFGS run per
/// annealing stage. Steps are taken in the tangent space and mapped back by
/// renormalization.
pub(crate) fn minimize_on_sphere<J: PairJudge>(
    theta0: Vec<f64>,
    design: &Design,
    judge: &J,
    opts: &MrcOptions,
) -> (Vec<f64>, OptimizerLog) {
    let mut log = OptimizerLog {
        iterations: 0,
        surrogate_values: Vec::new(),
        pairs_per_eval: total_pairs(design.n).min(opts.max_pairs_per_eval),
        warm_start_used: String::new(),
        converged: false,
        evaluations: 0,
    };
    let stages: Vec<f64> = if opts.anneal.is_empty() { vec![1.0] } else { opts.anneal.clone() };
    let mut theta = theta0;
    for mult in stages {
        let temp = opts.surrogate_temp * mult;
        let (next, converged) = lbfgs_stage(theta, design, judge, opts, temp, &mut log);
        theta = next;
        log.converged = converged;
    }
    (theta, log)
}

/// Longest tangent step tried first, in radians of the unit sphere.
const MAX_STEP: f64 = 0.5;
const MAX_HALVINGS: usize = 20;

fn lbfgs_stage<J: PairJudge>(
    mut theta: Vec<f64>,
    design: &Design,
    judge: &J,
    opts: &MrcOptions,
    temp: f64,
    log: &mut OptimizerLog,
) -> (Vec<f64>, bool) {
    let mut mem: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let resample = total_pairs(design.n) > opts.max_pairs_per_eval;
    let mut pairs = draw_pairs(design.n, opts.max_pairs_per_eval, opts.seed, log.iterations as u64);

    let mut carried: Option<(f64, Vec<f64>)> = None;
    for it in 0..opts.max_iter {
        if resample && it > 0 {
            pairs = draw_pairs(design.n, opts.max_pairs_per_eval, opts.seed, log.iterations as u64);
        }
        let (f, g) = match carried.take() {
            Some(fg) => fg,
            None => {
                log.evaluations += 1;
                surrogate(&theta, design, &pairs, judge, temp)
            }
        };
        log.surrogate_values.push(f);
        log.iterations += 1;
        let gt = tangent(&g, &theta);
        let gnorm = norm(&gt);
        if gnorm <= opts.tol {
            return (theta, true);
        }

        let mut tried_steepest = mem.is_empty();
        let mut dir = lbfgs_direction(&gt, &mem, &theta);
        let mut accepted = None;
        loop {
            let slope = dotp(&gt, &dir);
            if slope < 0.0 {
                let dn = norm(&dir).max(1e-300);
                let mut alpha = if mem.is_empty() { 0.1 / dn } else { (MAX_STEP / dn).min(1.0) };
                for _ in 0..MAX_HALVINGS {
                    log.evaluations += 1;
                    let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + alpha * d).collect();
                    if let Some(cand) = normalize(&cand) {
                        let (fc, gc) = surrogate(&cand, design, &pairs, judge, temp);
                        if fc <= f + 1e-4 * alpha * slope {
                            accepted = Some((cand, fc, gc));
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
            }
            if accepted.is_some() || tried_steepest {
                break;
            }
            mem.clear();
            dir = gt.iter().map(|v| -v).collect();
            tried_steepest = true;
        }
        let Some((next, fnext, gnext)) = accepted else {
            return (theta, true);
        };
        let stalled = f - fnext <= opts.tol * f.abs().max(1.0);
        let gt_next = tangent(&gnext, &next);
        let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gt_next.iter().zip(&gt).map(|(a, b)| a - b).collect();
        if dotp(&s, &yv) > 1e-12 * norm(&s) * norm(&yv) {
            mem.push((s, yv));
            if mem.len() > opts.memory.max(1) {
                mem.remove(0);
            }
        }
        theta = next;
        if stalled {
            return (theta, true);
        }
        if !resample {
            carried = Some((fnext, gnext));
        }
    }
    (theta, false)
}

fn lbfgs_direction(g: &[f64], mem: &[(Vec<f64>, Vec<f64>)], theta: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y) in mem.iter().rev() {
        let rho = 1.0 / dotp(y, s);
        let a = rho * dotp(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push((rho, a));
    }
    if let Some((s, y)) = mem.last() {
        let h0 = dotp(s, y) / dotp(y, y);
        q.iter_mut().for_each(|v| *v *= h0);
    }
    for ((s, y), (rho, a)) in mem.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dotp(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    let d: Vec<f64> = q.iter().map(|v| -v).collect();
    tangent(&d, theta)
}

/// Exact pairwise concordance
/// `(2 / (n (n - 1))) sum_{k<l} 1{(y_k - y_l)(theta . w_k - theta . w_l) > 0}`.
/// Ties on either side contribute zero.
pub fn rank_correlation_exact(theta: &[f64], w: &[Vec<f64>], y: &[f64]) -> f64 {
    let design = Design::from_rows(w);
    exact_concordance(&design.scores(theta), y)
}

pub(crate) fn exact_concordance(scores: &[f64], y: &[f64]) -> f64 {
    let n = scores.len();
    if n < 2 {
        return 0.0;
    }
    let row = |k: usize| -> u64 {
        let (sk, yk) = (scores[k], y[k]);
        (k + 1..n)
            .filter(|&l| (yk - y[l]) * (sk - scores[l]) > 0.0)
            .count() as u64
    };
    #[cfg(feature = "parallel")]
    let hits: u64 = (0..n).into_par_iter().map(row).sum();
    #[cfg(not(feature = "parallel"))]
    let hits: u64 = (0..n).map(row).sum();
    hits as f64 / total_pairs(n) as f64
}

pub(crate) fn warm_start_theta(
    design: &Design,
    z: &[Vec<f64>],
    s_hat: &[f64],
    y_for_ols: &[f64],
    opts: &MrcOptions,
) -> Result<(Vec<f64>, String)> {
    let random = || {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rng::stream(rng::derive_seed(opts.seed, u64::MAX), rng::STREAM_OPTIMIZER);
        let v: Vec<f64> = (0..design.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize(&v).expect("gaussian vector is nonzero")
    };
    match &opts.warm_start {
        WarmStart::Provided(v) => {
            check_dim("warm start", design.dim, v.len())?;
            let v = normalize(v).ok_or_else(|| CalibError::Config("zero warm start".into()))?;
            Ok((v, "provided".into()))
        }
        WarmStart::Random => Ok((random(), "random".into())),
        WarmStart::Ols => {
            let dir = ols_coefficients(z, s_hat, y_for_ols, DEFAULT_RIDGE)
                .ok()
                .and_then(|(_, tz, ts)| {
                    let mut v = tz;
                    v.push(ts);
                    normalize(&v)
                });
            Ok(match dir {
                Some(v) => (v, "ols".into()),
                None => (random(), "random (ols unavailable)".into()),
            })
        }
    }
}

/// Orients `theta` so the inclusive-value coefficient is negative and
/// recovers `gamma = -theta_z / theta_s`.
pub(crate) fn finish_direction(mut theta: Vec<f64>, slope_threshold: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = theta.len();
    if theta[dim - 1] > 0.0 {
        theta.iter_mut().for_each(|t| *t = -*t);
    }
    let ts = theta[dim - 1];
    if ts.abs() < slope_threshold {
        return Err(CalibError::DegenerateSlope { theta_s: ts, threshold: slope_threshold });
    }
    let gamma = theta[..dim - 1].iter().map(|t| -t / ts).collect();
    Ok((theta, gamma))
}

/// Rank-correlation calibration of a single predictor.
pub fn fit_mrc(z: &[Vec<f64>], s_hat: &[f64], y: &[f64], opts: &MrcOptions) -> Result<MrcFit> {
    let design = Design::from_parts(z, s_hat)?;
    check_dim("y length", design.n, y.len())?;
    if design.n < design.dim + 1 {
        return Err(CalibError::Config(format!(
            "need at least d + 2 = {} samples, got {}",
            design.dim + 1,
            design.n
        )));
    }
    if opts.max_pairs_per_eval == 0 {
        return Err(CalibError::Config("max_pairs_per_eval must be at least 1".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(CalibError::Data("non-finite predictor logit".into()));
    }
    if y.iter().all(|v| *v == y[0]) {
        return Err(CalibError::NoRankInformation);
    }
    let (theta0, used) = warm_start_theta(&design, z, s_hat, y, opts)?;
    let judge = SingleJudge { y };
    let (theta, mut log) = minimize_on_sphere(theta0, &design, &judge, opts);
    log.warm_start_used = used;
    let (theta_hat, gamma_hat) = finish_direction(theta, opts.slope_threshold)?;
    let objective_exact = exact_concordance(&design.scores(&theta_hat), y);
    Ok(MrcFit { theta_hat, gamma_hat, objective_exact, optimizer_log: log })
}
