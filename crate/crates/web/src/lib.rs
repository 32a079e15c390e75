//! Browser demo: link curves, a calibration run and an assortment decision,
//! each returned as a JSON string for the page to plot.

use outside_calib::assortment::{
    draw_decision_instances, expected_revenue, optimal_assortment, AssortmentMethod, MnlParams,
};
use outside_calib::choice::{dot, logistic};
use outside_calib::datagen::{link_value, Link, SyntheticConfig, World};
use outside_calib::linear::{fit_linear, DEFAULT_RIDGE, DEFAULT_SLOPE_THRESHOLD};
use outside_calib::metrics::error_quantile;
use outside_calib::mrc::{fit_mrc, MrcOptions};
use outside_calib::rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

const MAX_POINTS: usize = 400;

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct LinkParams {
    pub a_star: f64,
    pub b_star: f64,
    pub sigma_eps: f64,
    pub seed: u64,
    pub n: usize,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self { a_star: 1.0, b_star: 2.0, sigma_eps: 0.2, seed: 0, n: 300 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LinkCurves {
    pub eta: Vec<f64>,
    pub linear: Vec<f64>,
    pub monotone: Vec<f64>,
    /// Noisy monotone-link draws at the true logits of a synthetic sample.
    pub sample_eta: Vec<f64>,
    pub sample_y: Vec<f64>,
}

/// Noise-free link curves on `[-6, 2]` plus a noisy sample.
pub fn link_curves(p: &LinkParams) -> Result<LinkCurves, String> {
    let eta: Vec<f64> = (0..=160).map(|i| -6.0 + i as f64 * 0.05).collect();
    let curve = |link| eta.iter().map(|&e| link_value(link, e, p.a_star, p.b_star)).collect();
    let cfg = SyntheticConfig {
        n: p.n.clamp(2, MAX_POINTS),
        item_pool_size: 200,
        d_ctx: 8,
        d: 8,
        link: Link::MonotoneSoftplus,
        a_star: p.a_star,
        b_star: p.b_star,
        sigma_eps: p.sigma_eps,
        seed: p.seed,
        ..SyntheticConfig::default()
    };
    let ds = outside_calib::datagen::generate(&cfg).map_err(|e| e.to_string())?;
    Ok(LinkCurves {
        linear: curve(Link::Linear),
        monotone: curve(Link::MonotoneSoftplus),
        eta,
        sample_eta: ds.eta_true.clone(),
        sample_y: ds.predictor(0),
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct CalibrateParams {
    pub n: usize,
    pub d: usize,
    pub link: Link,
    pub sigma_est: f64,
    pub sigma_eps: f64,
    pub b_star: f64,
    pub seed: u64,
}

impl Default for CalibrateParams {
    fn default() -> Self {
        Self { n: 500, d: 8, link: Link::MonotoneSoftplus, sigma_est: 0.3, sigma_eps: 0.2, b_star: 2.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodResult {
    pub method: String,
    pub error_q70: Option<f64>,
    pub gamma_rel_err: Option<f64>,
    pub p_hat: Vec<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationRun {
    pub bar_tau: f64,
    pub tau_s: f64,
    pub p_true: Vec<f64>,
    pub methods: Vec<MethodResult>,
}

/// Fits linear and rank calibration on a synthetic training sample and
/// scores both on an independent test sample.
pub fn calibrate_synthetic(p: &CalibrateParams) -> Result<CalibrationRun, String> {
    let cfg = SyntheticConfig {
        n: p.n.clamp(50, 2000),
        item_pool_size: 300,
        d_ctx: p.d.clamp(1, 24),
        d: p.d.clamp(1, 24),
        link: p.link,
        sigma_est: p.sigma_est,
        sigma_eps: p.sigma_eps,
        b_star: p.b_star,
        seed: p.seed,
        ..SyntheticConfig::default()
    };
    let world = World::new(&cfg).map_err(|e| e.to_string())?;
    let train = world.sample(cfg.n, rng::STREAM_TRAIN).map_err(|e| e.to_string())?;
    let test = world.sample(MAX_POINTS, rng::STREAM_TEST).map_err(|e| e.to_string())?;
    let stats = outside_calib::utility::inclusive_error_stats(&train.s_hat, &train.s_true).map_err(|e| e.to_string())?;
    let (z, y) = (train.z_rows(), train.predictor(0));
    let z_test = test.z_rows();
    let p_true = test.p0_true();
    let norm = world.gamma_star.iter().map(|g| g * g).sum::<f64>().sqrt();

    let fits = [
        ("linear", fit_linear(&z, &train.s_hat, &y, DEFAULT_RIDGE, DEFAULT_SLOPE_THRESHOLD).map(|f| f.gamma_hat)),
        ("mrc", fit_mrc(&z, &train.s_hat, &y, &MrcOptions { seed: p.seed, ..MrcOptions::default() }).map(|f| f.gamma_hat)),
    ];
    let mut methods = Vec::new();
    for (name, fit) in fits {
        methods.push(match fit {
            Ok(g) => {
                let p_hat: Vec<f64> =
                    z_test.iter().zip(&test.s_hat).map(|(zk, s)| logistic(dot(&g, zk) - s)).collect();
                let err = g.iter().zip(&world.gamma_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                MethodResult {
                    method: name.into(),
                    error_q70: error_quantile(&p_true, &p_hat, 0.7).ok(),
                    gamma_rel_err: Some(err / norm),
                    p_hat,
                    failure: None,
                }
            }
            Err(e) => MethodResult {
                method: name.into(),
                error_q70: None,
                gamma_rel_err: None,
                p_hat: Vec::new(),
                failure: Some(e.to_string()),
            },
        });
    }
    Ok(CalibrationRun { bar_tau: stats.bar_tau, tau_s: stats.tau_s, p_true, methods })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct AssortParams {
    pub m_cand: usize,
    /// Scale of the perturbation applied to the true outside coefficients.
    pub gamma_noise: f64,
    pub seed: u64,
}

impl Default for AssortParams {
    fn default() -> Self {
        Self { m_cand: 10, gamma_noise: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AssortmentView {
    /// Candidate revenues in decreasing order.
    pub revenues: Vec<f64>,
    /// True expected revenue of each revenue-ordered prefix.
    pub prefix_revenue_true: Vec<f64>,
    /// Expected revenue of each prefix under the perturbed model.
    pub prefix_revenue_fitted: Vec<f64>,
    /// Positions (in `revenues` order) of the exhaustive-search optimum.
    pub brute_force_true: Vec<usize>,
    pub brute_force_revenue: f64,
    pub chosen_fitted: Vec<usize>,
    pub chosen_fitted_true_revenue: f64,
    pub suboptimality_pct: f64,
}

/// One decision instance: revenue-ordered prefixes under the true and a
/// perturbed outside model, checked against exhaustive search.
pub fn assortment_demo(p: &AssortParams) -> Result<AssortmentView, String> {
    let cfg = SyntheticConfig { n: 2, item_pool_size: 200, d_ctx: 8, d: 8, seed: p.seed, ..SyntheticConfig::default() };
    let world = World::new(&cfg).map_err(|e| e.to_string())?;
    let mut r = rng::stream(p.seed, rng::STREAM_DECISIONS);
    let m = p.m_cand.clamp(1, 12);
    let mut inst = draw_decision_instances(&world, 1, m, (1.0, 10.0), &mut r)
        .map_err(|e| e.to_string())?
        .remove(0);
    inst.candidates.sort_by(|a, b| b.revenue.total_cmp(&a.revenue).then(a.id.cmp(&b.id)));

    let mut noise = rng::stream(p.seed, rng::STREAM_OPTIMIZER);
    let gamma_fit: Vec<f64> = world
        .gamma_star
        .iter()
        .map(|g| {
            let e: f64 = StandardNormal.sample(&mut noise);
            g + p.gamma_noise * e / (cfg.d as f64).sqrt()
        })
        .collect();
    let truth = MnlParams { gamma: &world.gamma_star, beta: &world.beta_star };
    let fitted = MnlParams { gamma: &gamma_fit, beta: &world.beta_star };
    let prefixes = |params| {
        (1..=m)
            .map(|k| expected_revenue(&inst, &(0..k).collect::<Vec<_>>(), params))
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| e.to_string())
    };
    let best = optimal_assortment(&inst, truth, AssortmentMethod::BruteForce).map_err(|e| e.to_string())?;
    let chosen = optimal_assortment(&inst, fitted, AssortmentMethod::RevenueOrdered).map_err(|e| e.to_string())?;
    let chosen_true = expected_revenue(&inst, &chosen.selected, truth).map_err(|e| e.to_string())?;
    Ok(AssortmentView {
        revenues: inst.candidates.iter().map(|c| c.revenue).collect(),
        prefix_revenue_true: prefixes(truth)?,
        prefix_revenue_fitted: prefixes(fitted)?,
        brute_force_true: best.selected,
        brute_force_revenue: best.expected_revenue,
        chosen_fitted: chosen.selected,
        chosen_fitted_true_revenue: chosen_true,
        suboptimality_pct: 100.0 * (best.expected_revenue - chosen_true) / best.expected_revenue,
    })
}

fn run<P, R>(params: &str, f: impl Fn(&P) -> Result<R, String>) -> Result<String, JsValue>
where
    P: for<'de> Deserialize<'de> + Default,
    R: Serialize,
{
    let p: P = if params.trim().is_empty() {
        P::default()
    } else {
        serde_json::from_str(params).map_err(|e| JsValue::from_str(&e.to_string()))?
    };
    let out = f(&p).map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&out).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = linkCurves)]
pub fn link_curves_js(params: &str) -> Result<String, JsValue> {
    run(params, link_curves)
}

#[wasm_bindgen(js_name = calibrateSynthetic)]
pub fn calibrate_synthetic_js(params: &str) -> Result<String, JsValue> {
    run(params, calibrate_synthetic)
}

#[wasm_bindgen(js_name = assortmentDemo)]
pub fn assortment_demo_js(params: &str) -> Result<String, JsValue> {
    run(params, assortment_demo)
}
