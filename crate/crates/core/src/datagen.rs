//! Synthetic choice data: item pool, contexts, assortments, ground-truth
//! parameters, utility-estimation error and biased predictor logits.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::choice::{
    choice_probabilities, dot, inclusive_value, inside_utilities, outside_logit_identity,
    ChoiceInstance, ContextFeatures, ItemFeatures, OfferedItem, UtilityProfile,
};
use crate::error::{CalibError, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// Perturb the utility coefficients once and recompute every inclusive value.
    Structural,
    /// Perturb each inclusive value independently.
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDist {
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Linear,
    MonotoneSoftplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorSuite {
    /// One predictor through `link`.
    Single,
    /// The five heterogeneous predictors, the last one adversarial.
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub item_pool_size: usize,
    pub assortment_size_min: usize,
    pub assortment_size_max: usize,
    pub d_ctx: usize,
    pub d: usize,
    pub p: usize,
    pub item_corr_rho: f64,
    pub truncation_bound: f64,
    /// Contexts are clamped like item features when set.
    pub truncate_contexts: bool,
    pub error_mode: ErrorMode,
    pub error_dist: ErrorDist,
    pub sigma_est: f64,
    pub link: Link,
    pub predictors: PredictorSuite,
    pub a_star: f64,
    pub b_star: f64,
    pub sigma_eps: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            item_pool_size: 1000,
            assortment_size_min: 5,
            assortment_size_max: 15,
            d_ctx: 24,
            d: 24,
            p: 3,
            item_corr_rho: 0.5,
            truncation_bound: 3.0,
            truncate_contexts: true,
            error_mode: ErrorMode::Structural,
            error_dist: ErrorDist::Gaussian,
            sigma_est: 1.5,
            link: Link::Linear,
            predictors: PredictorSuite::Single,
            a_star: 1.0,
            b_star: 2.0,
            sigma_eps: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CalibError::Config(m.to_string()));
        if self.n < 2 {
            return fail("n must be at least 2");
        }
        if self.d_ctx == 0 || self.d == 0 || self.p == 0 {
            return fail("dimensions must be at least 1");
        }
        if self.d > self.d_ctx {
            return fail("d must not exceed d_ctx (W has orthonormal rows)");
        }
        if self.assortment_size_min < 1 {
            return fail("assortment_size_min must be at least 1");
        }
        if self.assortment_size_min > self.assortment_size_max {
            return fail("assortment_size_min exceeds assortment_size_max");
        }
        if self.assortment_size_max > self.item_pool_size {
            return fail("assortment_size_max exceeds item_pool_size");
        }
        if !(0.0..1.0).contains(&self.item_corr_rho) {
            return fail("item_corr_rho must lie in [0, 1)");
        }
        if self.truncation_bound.is_nan() || self.truncation_bound <= 0.0 {
            return fail("truncation_bound must be positive");
        }
        if [self.sigma_est, self.sigma_eps].iter().any(|v| v.is_nan() || *v < 0.0) {
            return fail("noise scales must be nonnegative");
        }
        Ok(())
    }

    pub fn num_predictors(&self) -> usize {
        match self.predictors {
            PredictorSuite::Single => 1,
            PredictorSuite::Multi => MULTI_PREDICTORS.len(),
        }
    }
}

/// Everything shared between a training sample and its test sample: the item
/// pool, the ground truth and the (mis-)learned utility coefficients.
#[derive(Debug, Clone)]
pub struct World {
    pub config: SyntheticConfig,
    pub pool: Vec<ItemFeatures>,
    pub beta_star: Vec<f64>,
    pub gamma_star: Vec<f64>,
    /// `d x d_ctx`, orthonormal rows.
    pub mix: DMatrix<f64>,
    /// `beta* + delta_beta` under structural error; `None` in additive mode.
    pub beta_hat: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub config: SyntheticConfig,
    pub instances: Vec<ChoiceInstance>,
    pub beta_star: Vec<f64>,
    pub gamma_star: Vec<f64>,
    pub beta_hat: Option<Vec<f64>>,
    /// Row-major `d x d_ctx`.
    pub mix_matrix_w: Vec<Vec<f64>>,
    pub s_true: Vec<f64>,
    pub s_hat: Vec<f64>,
    pub eta_true: Vec<f64>,
    /// `n x M` predictor logits.
    pub predictor_logits: Vec<Vec<f64>>,
}

impl GeneratedDataset {
    pub fn num_predictors(&self) -> usize {
        self.predictor_logits.first().map_or(0, Vec::len)
    }

    /// Column `m` of the predictor logit matrix.
    pub fn predictor(&self, m: usize) -> Vec<f64> {
        self.predictor_logits.iter().map(|row| row[m]).collect()
    }

    pub fn z_rows(&self) -> Vec<Vec<f64>> {
        self.instances.iter().map(|i| i.context.0.clone()).collect()
    }

    pub fn p0_true(&self) -> Vec<f64> {
        self.eta_true.iter().map(|&e| crate::choice::logistic(e)).collect()
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn equicorrelated(p: usize, rho: f64, bound: f64, rng: &mut Rng) -> ItemFeatures {
    let shared = rho.sqrt() * normal(rng);
    let own = (1.0 - rho).sqrt();
    ItemFeatures(
        (0..p)
            .map(|_| (shared + own * normal(rng)).clamp(-bound, bound))
            .collect(),
    )
}

/// Random `rows x cols` matrix with orthonormal rows (`rows <= cols`), from a
/// QR factorization of a Gaussian matrix with the diagonal of R made positive.
pub fn random_orthonormal_rows(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    assert!(rows <= cols);
    let g = DMatrix::from_fn(cols, rows, |_, _| normal(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..rows {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q.transpose()
}

fn draw_noise(dist: ErrorDist, scale: f64, rng: &mut Rng) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    match dist {
        ErrorDist::Gaussian => scale * normal(rng),
        ErrorDist::Uniform => rng.random_range(-scale..=scale),
    }
}

/// Coefficient perturbation for structural error: entries `N(0, sigma^2)` or
/// `Unif[-sigma/sqrt(p), sigma/sqrt(p)]`.
pub fn draw_beta_perturbation(p: usize, dist: ErrorDist, sigma_est: f64, rng: &mut Rng) -> Vec<f64> {
    let scale = match dist {
        ErrorDist::Gaussian => sigma_est,
        ErrorDist::Uniform => sigma_est / (p as f64).sqrt(),
    };
    (0..p).map(|_| draw_noise(dist, scale, rng)).collect()
}

pub fn inclusive_values_under(beta: &[f64], instances: &[ChoiceInstance]) -> Result<Vec<f64>> {
    instances
        .iter()
        .map(|inst| inclusive_value(&inside_utilities(beta, inst)?))
        .collect()
}

/// Produces estimated inclusive values from the true ones.
pub fn inject_utility_error(
    s_true: &[f64],
    beta_star: &[f64],
    instances: &[ChoiceInstance],
    mode: ErrorMode,
    dist: ErrorDist,
    sigma_est: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    match mode {
        ErrorMode::Structural => {
            let delta = draw_beta_perturbation(beta_star.len(), dist, sigma_est, rng);
            let beta_hat: Vec<f64> = beta_star.iter().zip(&delta).map(|(b, e)| b + e).collect();
            inclusive_values_under(&beta_hat, instances)
        }
        ErrorMode::Additive => Ok(s_true
            .iter()
            .map(|s| s + draw_noise(dist, sigma_est, rng))
            .collect()),
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Centered softplus with sharpness 20; zero at the origin, strictly increasing.
pub fn centered_softplus(eta: f64) -> f64 {
    (softplus(20.0 * eta) - std::f64::consts::LN_2) / 20.0
}

pub fn link_value(link: Link, eta: f64, a_star: f64, b_star: f64) -> f64 {
    match link {
        Link::Linear => a_star + b_star * eta,
        Link::MonotoneSoftplus => a_star + b_star * centered_softplus(eta),
    }
}

/// Predictor logits `y = h(eta) + N(0, sigma_eps^2)`.
pub fn apply_link(
    eta: &[f64],
    link: Link,
    a_star: f64,
    b_star: f64,
    sigma_eps: f64,
    rng: &mut Rng,
) -> Vec<f64> {
    eta.iter()
        .map(|&e| link_value(link, e, a_star, b_star) + draw_noise(ErrorDist::Gaussian, sigma_eps, rng))
        .collect()
}

/// One column of the multi-predictor suite:
/// `y = slope_b * b* * h + slope * h + a_weight * a* + offset + N(0, noise_sd^2)`.
#[derive(Debug, Clone, Copy)]
pub struct PredictorSpec {
    pub slope_b: f64,
    pub slope: f64,
    pub a_weight: f64,
    pub offset: f64,
    pub noise_sd: f64,
}

pub const MULTI_PREDICTORS: [PredictorSpec; 5] = [
    PredictorSpec { slope_b: 1.0, slope: 0.0, a_weight: 1.0, offset: 0.0, noise_sd: 0.5 },
    PredictorSpec { slope_b: 0.5, slope: 0.0, a_weight: 1.0, offset: 0.5, noise_sd: 0.5 },
    PredictorSpec { slope_b: 0.5, slope: 0.0, a_weight: 1.0, offset: -0.5, noise_sd: 0.5 },
    PredictorSpec { slope_b: 1.0, slope: 0.0, a_weight: 1.0, offset: 1.0, noise_sd: 1.0 },
    // anti-monotone, high noise
    PredictorSpec { slope_b: 0.0, slope: -2.5, a_weight: 0.0, offset: 0.0, noise_sd: 2.5 },
];

/// The five-predictor suite; returns an `n x 5` matrix. `noise_scale`
/// multiplies every column's noise standard deviation (1 for the standard suite).
pub fn gen_multi_predictors(
    eta: &[f64],
    a_star: f64,
    b_star: f64,
    noise_scale: f64,
    rng: &mut Rng,
) -> Vec<Vec<f64>> {
    eta.iter()
        .map(|&e| {
            let h = centered_softplus(e);
            MULTI_PREDICTORS
                .iter()
                .map(|spec| {
                    (spec.slope_b * b_star + spec.slope) * h
                        + spec.a_weight * a_star
                        + spec.offset
                        + draw_noise(ErrorDist::Gaussian, spec.noise_sd * noise_scale, rng)
                })
                .collect()
        })
        .collect()
}

fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws a choice for every instance from the MNL; outside draws leave
/// `chosen` empty.
pub fn sample_choices(
    instances: &mut [ChoiceInstance],
    beta_star: &[f64],
    gamma_star: &[f64],
    rng: &mut Rng,
) -> Result<()> {
    for inst in instances.iter_mut() {
        let inside = inside_utilities(beta_star, inst)?;
        let outside = outside_logit_identity(gamma_star, &inst.context, 0.0)?;
        let probs = choice_probabilities(&UtilityProfile { inside, outside });
        let mut all = probs.inside;
        all.push(probs.outside);
        let pick = sample_categorical(&all, rng);
        inst.chosen = (pick < inst.items.len()).then_some(pick);
    }
    Ok(())
}

impl World {
    pub fn new(config: &SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, rng::STREAM_WORLD);
        let pool = (0..config.item_pool_size)
            .map(|_| equicorrelated(config.p, config.item_corr_rho, config.truncation_bound, &mut rng))
            .collect();
        let beta_star: Vec<f64> = (0..config.p).map(|_| normal(&mut rng)).collect();
        let mix = random_orthonormal_rows(config.d, config.d_ctx, &mut rng);
        let scale = (config.d as f64).sqrt();
        let gamma_star = (0..config.d).map(|_| normal(&mut rng) / scale).collect();
        let beta_hat = match config.error_mode {
            ErrorMode::Structural => {
                let delta = draw_beta_perturbation(config.p, config.error_dist, config.sigma_est, &mut rng);
                Some(beta_star.iter().zip(&delta).map(|(b, e)| b + e).collect())
            }
            ErrorMode::Additive => None,
        };
        Ok(Self { config: config.clone(), pool, beta_star, gamma_star, mix, beta_hat })
    }

    pub fn draw_context(&self, rng: &mut Rng) -> ContextFeatures {
        let c = &self.config;
        let x: Vec<f64> = (0..c.d_ctx)
            .map(|_| {
                let v = normal(rng);
                if c.truncate_contexts {
                    v.clamp(-c.truncation_bound, c.truncation_bound)
                } else {
                    v
                }
            })
            .collect();
        ContextFeatures((0..c.d).map(|r| dot(self.mix.row(r).transpose().as_slice(), &x)).collect())
    }

    pub fn draw_assortment(&self, size: usize, rng: &mut Rng) -> Result<Vec<OfferedItem>> {
        if size == 0 || size > self.pool.len() {
            return Err(CalibError::Config(format!(
                "cannot draw {size} items from a pool of {}",
                self.pool.len()
            )));
        }
        let mut picks = index::sample(rng, self.pool.len(), size).into_vec();
        picks.sort_unstable();
        Ok(picks
            .into_iter()
            .map(|i| OfferedItem { id: i as u32, x: self.pool[i].clone(), revenue: None })
            .collect())
    }

    /// Draws `n` labelled instances from the given random stream.
    pub fn sample(&self, n: usize, stream: u64) -> Result<GeneratedDataset> {
        let c = &self.config;
        let mut rng = rng::stream(c.seed, stream);
        let mut instances = Vec::with_capacity(n);
        for _ in 0..n {
            let context = self.draw_context(&mut rng);
            let size = rng.random_range(c.assortment_size_min..=c.assortment_size_max);
            let items = self.draw_assortment(size, &mut rng)?;
            instances.push(ChoiceInstance { context, items, chosen: None });
        }
        let s_true = inclusive_values_under(&self.beta_star, &instances)?;
        let eta_true = instances
            .iter()
            .zip(&s_true)
            .map(|(inst, &s)| outside_logit_identity(&self.gamma_star, &inst.context, s))
            .collect::<Result<Vec<_>>>()?;
        let s_hat = match &self.beta_hat {
            Some(bh) => inclusive_values_under(bh, &instances)?,
            None => s_true
                .iter()
                .map(|s| s + draw_noise(c.error_dist, c.sigma_est, &mut rng))
                .collect(),
        };
        let predictor_logits = match c.predictors {
            PredictorSuite::Single => apply_link(&eta_true, c.link, c.a_star, c.b_star, c.sigma_eps, &mut rng)
                .into_iter()
                .map(|y| vec![y])
                .collect(),
            PredictorSuite::Multi => gen_multi_predictors(&eta_true, c.a_star, c.b_star, 1.0, &mut rng),
        };
        let mut choice_rng = rng::stream(rng::derive_seed(c.seed, stream), rng::STREAM_CHOICES);
        sample_choices(&mut instances, &self.beta_star, &self.gamma_star, &mut choice_rng)?;

        let mut cfg = c.clone();
        cfg.n = n;
        Ok(GeneratedDataset {
            config: cfg,
            instances,
            beta_star: self.beta_star.clone(),
            gamma_star: self.gamma_star.clone(),
            beta_hat: self.beta_hat.clone(),
            mix_matrix_w: self
                .mix
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            s_true,
            s_hat,
            eta_true,
            predictor_logits,
        })
    }
}

/// Generates the training dataset described by `config`.
pub fn generate(config: &SyntheticConfig) -> Result<GeneratedDataset> {
    World::new(config)?.sample(config.n, rng::STREAM_TRAIN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small() -> SyntheticConfig {
        SyntheticConfig { n: 200, item_pool_size: 100, d_ctx: 6, d: 4, seed: 3, ..Default::default() }
    }

    #[test]
    fn default_shapes() {
        let ds = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(ds.instances.len(), 2000);
        assert!(ds.instances.iter().all(|i| (5..=15).contains(&i.items.len())));
        assert!(ds.instances.iter().all(|i| i.context.0.len() == 24 && i.item_dim() == 3));
        assert_eq!(ds.num_predictors(), 1);
        for inst in &ds.instances {
            inst.validate().unwrap();
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SyntheticConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.s_true, c.s_true);
    }

    #[test]
    fn zero_estimation_noise_leaves_inclusive_values() {
        for mode in [ErrorMode::Structural, ErrorMode::Additive] {
            let ds = generate(&SyntheticConfig { sigma_est: 0.0, error_mode: mode, ..small() }).unwrap();
            assert_eq!(ds.s_hat, ds.s_true);
        }
    }

    #[test]
    fn injected_errors() {
        let ds = generate(&small()).unwrap();
        let mut rng = rng::stream(1, 9);
        let s = inject_utility_error(&ds.s_true, &ds.beta_star, &ds.instances, ErrorMode::Additive, ErrorDist::Gaussian, 0.0, &mut rng).unwrap();
        assert_eq!(s, ds.s_true);
        let s = inject_utility_error(&ds.s_true, &ds.beta_star, &ds.instances, ErrorMode::Additive, ErrorDist::Uniform, 1.5, &mut rng).unwrap();
        let max = s.iter().zip(&ds.s_true).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max <= 1.5 && max > 0.5);
        let s = inject_utility_error(&ds.s_true, &ds.beta_star, &ds.instances, ErrorMode::Structural, ErrorDist::Gaussian, 0.0, &mut rng).unwrap();
        assert_eq!(s, ds.s_true);
        let delta = draw_beta_perturbation(3, ErrorDist::Uniform, 1.5, &mut rng);
        assert!(delta.iter().all(|d| d.abs() <= 1.5 / 3f64.sqrt()));
    }

    #[test]
    fn links() {
        let mut rng = rng::stream(0, 0);
        assert_eq!(apply_link(&[0.5], Link::Linear, 1.0, 2.0, 0.0, &mut rng), vec![2.0]);
        assert_eq!(apply_link(&[0.0], Link::MonotoneSoftplus, 1.0, 2.0, 0.0, &mut rng), vec![1.0]);
        let grid: Vec<f64> = (-400..=400).map(|i| i as f64 * 0.01).collect();
        let h = apply_link(&grid, Link::MonotoneSoftplus, 1.0, 2.0, 0.0, &mut rng);
        assert!(h.windows(2).all(|w| w[0] <= w[1]));
        assert!(softplus(1000.0).is_finite());
        assert_abs_diff_eq!(softplus(1000.0), 1000.0);
    }

    #[test]
    fn multi_predictor_columns() {
        let mut rng = rng::stream(0, 0);
        let y = gen_multi_predictors(&[0.0], 1.0, 2.0, 0.0, &mut rng);
        let expected = [1.0, 1.5, 0.5, 2.0, 0.0];
        for (got, want) in y[0].iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
        let grid: Vec<f64> = (-100..=100).map(|i| i as f64 * 0.02).collect();
        let y = gen_multi_predictors(&grid, 1.0, 2.0, 0.0, &mut rng);
        for m in 0..4 {
            assert!(y.windows(2).all(|w| w[0][m] <= w[1][m]));
        }
        assert!(y.windows(2).all(|w| w[0][4] >= w[1][4]));
        let a = gen_multi_predictors(&grid, 1.0, 2.0, 1.0, &mut rng::stream(5, 1));
        let b = gen_multi_predictors(&grid, 1.0, 2.0, 1.0, &mut rng::stream(5, 1));
        assert_eq!(a, b);
    }

    #[test]
    fn orthonormal_mixing_rows() {
        let mut rng = rng::stream(11, 0);
        let w = random_orthonormal_rows(24, 24, &mut rng);
        let gram = &w * w.transpose();
        let err = (gram - DMatrix::<f64>::identity(24, 24)).amax();
        assert!(err <= 1e-10, "{err}");
        let w = random_orthonormal_rows(5, 9, &mut rng);
        assert!(((&w * w.transpose()) - DMatrix::<f64>::identity(5, 5)).amax() <= 1e-10);
    }

    #[test]
    fn features_respect_truncation() {
        let ds = generate(&SyntheticConfig { truncation_bound: 1.0, ..small() }).unwrap();
        let world = World::new(&SyntheticConfig { truncation_bound: 1.0, ..small() }).unwrap();
        assert!(world.pool.iter().flat_map(|x| &x.0).all(|v| v.abs() <= 1.0));
        assert!(ds.instances.iter().flat_map(|i| &i.items).flat_map(|it| &it.x.0).all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn pool_correlation_near_rho() {
        let cfg = SyntheticConfig { item_pool_size: 100_000, d_ctx: 2, d: 2, ..Default::default() };
        let world = World::new(&cfg).unwrap();
        let n = world.pool.len() as f64;
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let xa: Vec<f64> = world.pool.iter().map(|x| x.0[a]).collect();
            let xb: Vec<f64> = world.pool.iter().map(|x| x.0[b]).collect();
            let ma = xa.iter().sum::<f64>() / n;
            let mb = xb.iter().sum::<f64>() / n;
            let cov: f64 = xa.iter().zip(&xb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
            let va: f64 = xa.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
            let vb: f64 = xb.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
            let r = cov / (va * vb).sqrt();
            assert!((r - 0.5).abs() <= 0.05, "corr {r}");
        }
    }

    #[test]
    fn stored_logits_match_identity() {
        let ds = generate(&small()).unwrap();
        for (k, inst) in ds.instances.iter().enumerate() {
            let s = inclusive_value(&inside_utilities(&ds.beta_star, inst).unwrap()).unwrap();
            assert_eq!(s, ds.s_true[k]);
            assert_eq!(outside_logit_identity(&ds.gamma_star, &inst.context, ds.s_true[k]).unwrap(), ds.eta_true[k]);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&SyntheticConfig { assortment_size_min: 9, assortment_size_max: 3, ..small() }).is_err());
        assert!(generate(&SyntheticConfig { assortment_size_max: 500, ..small() }).is_err());
        assert!(generate(&SyntheticConfig { n: 1, ..small() }).is_err());
    }

    #[test]
    fn choices_without_outside_mass() {
        let mut ds = generate(&small()).unwrap();
        // u_0 = -800, far below every inside utility
        for inst in ds.instances.iter_mut() {
            inst.context = ContextFeatures(vec![-1.0; 4]);
        }
        let mut rng = rng::stream(2, 0);
        sample_choices(&mut ds.instances, &ds.beta_star, &[200.0; 4], &mut rng).unwrap();
        assert!(ds.instances.iter().all(|i| i.chosen.is_some()));
    }

    #[test]
    fn identical_items_split_evenly() {
        let item = |id| OfferedItem { id, x: ItemFeatures(vec![0.3, -0.2]), revenue: None };
        let template = ChoiceInstance { context: ContextFeatures(vec![-50.0]), items: vec![item(0), item(1)], chosen: None };
        let n = 40_000;
        let mut insts = vec![template; n];
        let mut rng = rng::stream(8, 0);
        sample_choices(&mut insts, &[1.0, 1.0], &[1.0], &mut rng).unwrap();
        let first = insts.iter().filter(|i| i.chosen == Some(0)).count() as f64;
        let se = (n as f64 * 0.25).sqrt();
        assert!((first - n as f64 / 2.0).abs() <= 3.0 * se, "{first}");
    }
}
