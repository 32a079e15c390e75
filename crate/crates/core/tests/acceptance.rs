//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the lines appear in `cargo test` output. The
//! process fails when a criterion fails, except for those in `KNOWN_FAILING`,
//! which are still reported as FAIL.

use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use outside_calib::assortment::{
    draw_decision_instances, max_revenue_error, optimal_assortment, revenue_gap, suboptimality,
    AssortmentMethod, MnlParams,
};
use outside_calib::choice::{
    choice_probabilities, dot, inclusive_value, logistic, outside_logit_identity, ContextFeatures,
    UtilityProfile,
};
use outside_calib::datagen::{generate, Link, PredictorSuite, SyntheticConfig, World};
use outside_calib::experiment::{run_experiment, ExpId, ExperimentSpec, Grid, GridAxis, Method, ResultRow};
use outside_calib::linear::{fit_linear, DEFAULT_RIDGE, DEFAULT_SLOPE_THRESHOLD};
use outside_calib::metrics::{ece_reliability, error_quantile, nll};
use outside_calib::mrc::{fit_mrc, rank_correlation_exact, MrcOptions};
use outside_calib::multi::{fit_consensus, fit_pooled, logit_mean_baseline, MultiMode, MultiOptions};
use outside_calib::rng::{self, STREAM_TEST, STREAM_TRAIN};
use outside_calib::utility::{conditional_gradient, conditional_log_likelihood, fit_conditional_mnl, MnlOptions};

/// Criteria that fail at the specified settings; see the project notes.
const KNOWN_FAILING: &[u32] = &[5, 8];

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

fn design(z: &[Vec<f64>], s: &[f64]) -> Vec<Vec<f64>> {
    z.iter().zip(s).map(|(zk, sk)| zk.iter().copied().chain([*sk]).collect()).collect()
}

fn criterion_1() -> Outcome {
    let mut r = rng::stream(1, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = r.random_range(1..=30);
        let m = r.random_range(1..=20);
        let scale = r.random_range(0.1..5.0);
        let gamma: Vec<f64> = (0..d).map(|_| scale * normal(&mut r)).collect();
        let z = ContextFeatures((0..d).map(|_| normal(&mut r)).collect());
        let inside: Vec<f64> = (0..m).map(|_| scale * normal(&mut r)).collect();
        let s = inclusive_value(&inside).unwrap();
        let eta = outside_logit_identity(&gamma, &z, s).unwrap();
        let p0 = choice_probabilities(&UtilityProfile { inside, outside: dot(&gamma, &z.0) }).outside;
        worst = worst.max((logistic(eta) - p0).abs());
    }
    outcome(worst <= 1e-10, format!("max |logistic(eta) - p0| = {worst:.2e} over 1000 draws"))
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for (a, b) in [(1.0, 2.0), (-3.0, 5.0)] {
        let cfg = SyntheticConfig { n: 500, link: Link::Linear, a_star: a, b_star: b, sigma_eps: 0.0, seed: 11, ..Default::default() };
        let ds = generate(&cfg).unwrap();
        let fit = fit_linear(&ds.z_rows(), &ds.s_true, &ds.predictor(0), DEFAULT_RIDGE, DEFAULT_SLOPE_THRESHOLD).unwrap();
        let err = fit.gamma_hat.iter().zip(&ds.gamma_star).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    outcome(worst <= 1e-6, format!("max coordinate error {worst:.2e} for (a*, b*) in {{(1, 2), (-3, 5)}}"))
}

fn criterion_3() -> Outcome {
    let mut rel = Vec::new();
    let mut worst_gap = f64::NEG_INFINITY;
    for seed in 0..10 {
        let cfg = SyntheticConfig { link: Link::MonotoneSoftplus, sigma_eps: 0.0, seed, ..Default::default() };
        let ds = generate(&cfg).unwrap();
        let z = ds.z_rows();
        let y = ds.predictor(0);
        let fit = fit_mrc(&z, &ds.s_true, &y, &MrcOptions { seed, ..Default::default() }).unwrap();
        rel.push(l2(&fit.gamma_hat, &ds.gamma_star) / ds.gamma_star.iter().map(|g| g * g).sum::<f64>().sqrt());
        let truth: Vec<f64> = ds.gamma_star.iter().copied().chain([-1.0]).collect();
        let w = design(&z, &ds.s_true);
        worst_gap = worst_gap.max(rank_correlation_exact(&truth, &w, &y) - fit.objective_exact);
    }
    let med = median(rel);
    outcome(
        med <= 0.1 && worst_gap <= 1e-3,
        format!("median relative gamma error {med:.4}; max objective shortfall vs truth {worst_gap:.2e}"),
    )
}

fn criterion_4() -> Outcome {
    let mut r = rng::stream(4, 0);
    let mut violations = 0;
    for trial in 0..200 {
        let n = 40;
        let d = r.random_range(1..=5);
        let w: Vec<Vec<f64>> = (0..n).map(|_| (0..=d).map(|_| normal(&mut r)).collect()).collect();
        let theta: Vec<f64> = (0..=d).map(|_| normal(&mut r)).collect();
        // values on a coarse grid so ties occur and transforms keep them distinct
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-30i32..=30) as f64 / 10.0).collect();
        let base = rank_correlation_exact(&theta, &w, &y);
        let other = if trial < 100 {
            let f: fn(f64) -> f64 = match trial % 3 {
                0 => |v| v.powi(3) + v,
                1 => f64::exp,
                _ => |v| 7.0 * v.atan() - 2.0,
            };
            let yt: Vec<f64> = y.iter().map(|&v| f(v)).collect();
            rank_correlation_exact(&theta, &w, &yt)
        } else {
            let c = r.random_range(0.01..100.0);
            let scaled: Vec<f64> = theta.iter().map(|t| c * t).collect();
            rank_correlation_exact(&scaled, &w, &y)
        };
        violations += usize::from(base != other);
    }
    outcome(violations == 0, format!("{violations} of 200 trials changed the objective (100 transforms, 100 scalings)"))
}

fn run_exp1(link: Link, methods: Vec<Method>, dir: &std::path::Path) -> Vec<ResultRow> {
    let mut spec = ExperimentSpec::preset(ExpId::Exp1);
    spec.grid = Grid { axis: GridAxis::N, values: vec![200.0, 8000.0] };
    spec.link = link;
    spec.methods = methods;
    spec.seeds = (0..10).collect();
    spec.save_predictions = false;
    spec.output_dir = dir.to_path_buf();
    run_experiment(&spec).unwrap().rows
}

fn mean_error(rows: &[ResultRow], method: Method, n: f64) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.method == method && r.grid_point == n).filter_map(|r| r.error_q70).collect();
    assert_eq!(v.len(), 10, "missing rows for {method:?} at n = {n}");
    mean(&v)
}

fn criterion_5() -> Outcome {
    let lin_dir = tempfile::tempdir().unwrap();
    let mono_dir = tempfile::tempdir().unwrap();
    let lin = run_exp1(Link::Linear, vec![Method::Linear], lin_dir.path());
    let methods = vec![Method::Linear, Method::Mrc, Method::LinearOracle, Method::MrcOracle];
    let mono = run_exp1(Link::MonotoneSoftplus, methods, mono_dir.path());
    let (ll200, ll8000) = (mean_error(&lin, Method::Linear, 200.0), mean_error(&lin, Method::Linear, 8000.0));
    let (mm200, mm8000) = (mean_error(&mono, Method::Mrc, 200.0), mean_error(&mono, Method::Mrc, 8000.0));
    let lm8000 = mean_error(&mono, Method::Linear, 8000.0);
    let (lo8000, mo8000) = (mean_error(&mono, Method::LinearOracle, 8000.0), mean_error(&mono, Method::MrcOracle, 8000.0));
    outcome(
        ll8000 < ll200 && mm8000 < mm200 && lm8000 > mm8000,
        format!(
            "linear/linear {ll200:.4} -> {ll8000:.4}; mrc/monotone {mm200:.4} -> {mm8000:.4}; \
             at n=8000 linear/monotone {lm8000:.4} vs mrc {mm8000:.4} \
             (with true inclusive values {lo8000:.4} vs {mo8000:.4})"
        ),
    )
}

fn decision_world(seed: u64) -> World {
    World::new(&SyntheticConfig { n: 2, item_pool_size: 300, d_ctx: 6, d: 6, seed, ..Default::default() }).unwrap()
}

fn criterion_6() -> Outcome {
    let mut worst = 0.0f64;
    let mut sub_nonzero = 0;
    let mut r = rng::stream(6, rng::STREAM_DECISIONS);
    for k in 0..200u64 {
        let world = decision_world(k);
        let m = r.random_range(1..=12);
        let inst = draw_decision_instances(&world, 1, m, (1.0, 10.0), &mut r).unwrap();
        let truth = MnlParams { gamma: &world.gamma_star, beta: &world.beta_star };
        let ro = optimal_assortment(&inst[0], truth, AssortmentMethod::RevenueOrdered).unwrap();
        let bf = optimal_assortment(&inst[0], truth, AssortmentMethod::BruteForce).unwrap();
        worst = worst.max((ro.expected_revenue - bf.expected_revenue).abs());
        let sub = suboptimality(&inst, truth, truth, AssortmentMethod::RevenueOrdered).unwrap();
        sub_nonzero += usize::from(sub != 0.0);
    }
    outcome(
        worst <= 1e-10 && sub_nonzero == 0,
        format!("max |revenue-ordered - brute force| = {worst:.2e}; nonzero self-suboptimality in {sub_nonzero} of 200"),
    )
}

fn criterion_7() -> Outcome {
    let cfg = SyntheticConfig { n: 500, item_pool_size: 300, d_ctx: 6, d: 6, sigma_est: 0.5, seed: 7, ..Default::default() };
    let world = World::new(&cfg).unwrap();
    let train = world.sample(cfg.n, STREAM_TRAIN).unwrap();
    let fit = fit_linear(&train.z_rows(), &train.s_hat, &train.predictor(0), DEFAULT_RIDGE, DEFAULT_SLOPE_THRESHOLD).unwrap();
    let beta_hat = world.beta_hat.clone().unwrap();
    let truth = MnlParams { gamma: &world.gamma_star, beta: &world.beta_star };
    let fitted = MnlParams { gamma: &fit.gamma_hat, beta: &beta_hat };
    let mut r = rng::stream(7, rng::STREAM_DECISIONS);
    let instances = draw_decision_instances(&world, 50, 10, (1.0, 10.0), &mut r).unwrap();
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for inst in &instances {
        let gap = revenue_gap(inst, truth, fitted, AssortmentMethod::BruteForce).unwrap();
        let bound = 2.0 * max_revenue_error(inst, truth, fitted).unwrap();
        violations += usize::from(gap > bound);
        tightest = tightest.min(bound - gap);
    }
    outcome(violations == 0, format!("{violations} of 50 instances exceed 2 max|R - R_hat|; smallest slack {tightest:.3e}"))
}

fn criterion_8() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for n in [500usize, 2000] {
        let (mut pooled, mut cons, mut lm) = (Vec::new(), Vec::new(), Vec::new());
        let mut o5_neg = 0;
        for seed in 0..10 {
            let cfg = SyntheticConfig { link: Link::MonotoneSoftplus, predictors: PredictorSuite::Multi, seed, ..Default::default() };
            let world = World::new(&cfg).unwrap();
            let tr = world.sample(n, STREAM_TRAIN).unwrap();
            let te = world.sample(2000, STREAM_TEST).unwrap();
            let z = tr.z_rows();
            let (zt, p0) = (te.z_rows(), te.p0_true());
            let err = |g: &[f64]| {
                let ph: Vec<f64> = zt.iter().zip(&te.s_hat).map(|(zk, s)| logistic(dot(g, zk) - s)).collect();
                error_quantile(&p0, &ph, 0.7).unwrap()
            };
            let mo = MultiOptions { mrc: MrcOptions { seed, ..Default::default() }, ..Default::default() };
            let pf = fit_pooled(&z, &tr.s_hat, &tr.predictor_logits, &mo).unwrap();
            let cf = fit_consensus(&z, &tr.s_hat, &tr.predictor_logits, &MultiOptions { mode: MultiMode::Consensus, ..mo.clone() }).unwrap();
            let ybar = logit_mean_baseline(&tr.predictor_logits).unwrap();
            let lf = fit_mrc(&z, &tr.s_hat, &ybar, &mo.mrc).unwrap();
            pooled.push(err(&pf.fit.gamma_hat));
            cons.push(err(&cf.gamma_hat));
            lm.push(err(&lf.gamma_hat));
            o5_neg += usize::from(pf.orientations[4] == -1);
        }
        let (mp, mc, ml) = (median(pooled), median(cons), median(lm));
        pass &= mp < ml && mc < ml && o5_neg >= 9;
        lines.push(format!("n={n}: pooled {mp:.4} consensus {mc:.4} logit-mean {ml:.4}, o5=-1 in {o5_neg}/10"));
    }
    outcome(pass, lines.join("; "))
}

fn criterion_9() -> Outcome {
    let cfg = SyntheticConfig { n: 400, item_pool_size: 200, d_ctx: 4, d: 4, seed: 9, ..Default::default() };
    let ds = generate(&cfg).unwrap();
    let tx: Vec<_> = ds.instances.iter().filter(|i| i.chosen.is_some()).cloned().collect();
    let mut r = rng::stream(9, 0);
    let mut worst_fd = 0.0f64;
    let h = 1e-5;
    for _ in 0..20 {
        let beta: Vec<f64> = (0..cfg.p).map(|_| normal(&mut r)).collect();
        let g = conditional_gradient(&beta, &tx).unwrap();
        let fd: Vec<f64> = (0..cfg.p)
            .map(|j| {
                let mut up = beta.clone();
                let mut dn = beta.clone();
                up[j] += h;
                dn[j] -= h;
                (conditional_log_likelihood(&up, &tx).unwrap() - conditional_log_likelihood(&dn, &tx).unwrap()) / (2.0 * h)
            })
            .collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        worst_fd = worst_fd.max(l2(&g, &fd) / norm);
    }

    let mut monotone = true;
    let (mut small, mut large) = (Vec::new(), Vec::new());
    for seed in 0..10 {
        for (n, sink) in [(500usize, &mut small), (8000, &mut large)] {
            let ds = generate(&SyntheticConfig { n, seed, ..Default::default() }).unwrap();
            let tx: Vec<_> = ds.instances.into_iter().filter(|i| i.chosen.is_some()).collect();
            let m = fit_conditional_mnl(&tx, &MnlOptions::default()).unwrap();
            monotone &= m.fit_log.trace.windows(2).all(|w| w[1] >= w[0]);
            sink.push(l2(&m.beta_hat, &ds.beta_star));
        }
    }
    let (ms, ml) = (median(small), median(large));
    outcome(
        worst_fd <= 1e-6 && monotone && ml < ms,
        format!("max relative gradient error {worst_fd:.2e}; ascent monotone {monotone}; median beta error n=500 {ms:.4}, n=8000 {ml:.4}"),
    )
}

fn criterion_10() -> Outcome {
    let mut worst = 0.0f64;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());
    check(error_quantile(&[0.0; 5], &[0.0, 0.1, 0.2, 0.3, 0.4], 0.7).unwrap(), 0.28);
    check(error_quantile(&[0.0; 3], &[0.1, 0.2, 0.3], 0.5).unwrap(), 0.2);
    check(nll(&[true, false], &[0.9, 0.2], 1e-7).unwrap(), -(0.9f64.ln() + 0.8f64.ln()) / 2.0);
    check(nll(&[true, false, true], &[0.5; 3], 1e-7).unwrap(), 2f64.ln());
    check(nll(&[true, false], &[1.0, 0.0], 1e-7).unwrap(), -(1.0f64 - 1e-7).ln());
    check(ece_reliability(&[true, false, true, false], &[0.5; 4], 10).unwrap().ece, 0.0);
    check(ece_reliability(&[false; 6], &[0.9; 6], 10).unwrap().ece, 0.9);
    let labels = [true, false, false, false, true, true, true, false];
    let p = [0.05, 0.05, 0.05, 0.05, 0.95, 0.95, 0.95, 0.95];
    check(ece_reliability(&labels, &p, 10).unwrap().ece, 0.2);

    let mut r = rng::stream(10, 0);
    let mut identity = 0.0f64;
    for _ in 0..50 {
        let n = r.random_range(1..300);
        let p: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let labels: Vec<bool> = p.iter().map(|&q| r.random::<f64>() < q).collect();
        let t = ece_reliability(&labels, &p, r.random_range(1..20)).unwrap();
        identity = identity.max((t.ece - t.recompute_ece()).abs());
    }
    outcome(
        worst <= 1e-9 && identity <= 1e-12,
        format!("max fixture deviation {worst:.2e}; ECE recomputation gap {identity:.2e}"),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "outside-logit identity round trip", Duration::from_secs(1), criterion_1),
        (2, "exact identification, noiseless linear predictor", Duration::from_secs(1), criterion_2),
        (3, "rank calibration recovery, monotone link", Duration::from_secs(120), criterion_3),
        (4, "rank objective invariances", Duration::from_secs(10), criterion_4),
        (5, "convergence trend in n", Duration::from_secs(900), criterion_5),
        (6, "revenue-ordered equals brute force", Duration::from_secs(60), criterion_6),
        (7, "revenue gap envelope", Duration::from_secs(60), criterion_7),
        (8, "multi-predictor robustness", Duration::from_secs(600), criterion_8),
        (9, "conditional likelihood fit", Duration::from_secs(300), criterion_9),
        (10, "metric fixtures", Duration::from_secs(1), criterion_10),
    ];
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut unexpected = Vec::new();
    let mut passed = 0;
    let mut ran = 0;
    for (id, name, budget, f) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let o = f();
        let elapsed = t.elapsed();
        let pass = o.pass && elapsed <= budget;
        let timing = format!("{:.2}s of {}s", elapsed.as_secs_f64(), budget.as_secs());
        println!("criterion {id:>2} {}  {name}: {} ({timing})", if pass { "PASS" } else { "FAIL" }, o.detail);
        if pass {
            passed += 1;
        } else if !KNOWN_FAILING.contains(&id) {
            unexpected.push(id);
        }
    }
    println!("acceptance: {passed}/{ran} criteria pass");
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
