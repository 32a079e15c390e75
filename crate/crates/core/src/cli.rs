//! Command-line interface.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng as _;

use crate::assortment::{
    expected_revenue, optimal_assortment, AssortmentMethod, Candidate, DecisionInstance, MnlParams,
};
use crate::choice::{dot, logistic, ItemFeatures};
use crate::datagen::{SyntheticConfig, World};
use crate::error::{CalibError, Result};
use crate::experiment::{run_experiment, verify, ExpId, ExperimentSpec, ResultRow};
use crate::io::{
    apply_overrides, io_err, load_dataset, load_json, parse_key_values, reject_unknown, save_dataset, save_json,
    Calibration, Dataset, FitFile,
};
use crate::linear::{fit_linear, DEFAULT_SLOPE_THRESHOLD};
use crate::metrics::{ece_reliability, error_quantile, nll_default, DEFAULT_BINS};
use crate::mrc::{fit_mrc, MrcOptions};
use crate::multi::{fit_consensus, fit_pooled, MultiMode, MultiOptions};
use crate::rng;
use crate::utility::{fit_conditional_mnl, inclusive_error_stats, inclusive_values, MnlOptions, UtilityModel};

#[derive(Debug, Parser)]
#[command(name = "outside-calib", version, about = "Calibrate outside-option predictors from purchase-only data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Fit inside-item utilities by conditional maximum likelihood.
    FitUtilities(FitUtilitiesArgs),
    /// Recover the outside-utility coefficients from predictor logits.
    Calibrate(CalibrateArgs),
    /// Score a calibration on a dataset.
    Evaluate(EvaluateArgs),
    /// Choose assortments under a calibrated model.
    Assort(AssortArgs),
    /// Run a synthetic experiment and write its results table.
    Experiment(ExperimentArgs),
    /// Recompute error_q70 for random rows of a results table.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// key = value file with SyntheticConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Train and test splits share the item pool and ground truth.
    #[arg(long, value_enum, default_value_t = Split::Train)]
    split: Split,
    /// Attach a Unif[lo, hi] revenue to every pool item.
    #[arg(long, value_name = "LO,HI")]
    revenues: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FitUtilitiesArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = MnlOptions::default().tol)]
    tol: f64,
    #[arg(long, default_value_t = MnlOptions::default().max_iter)]
    max_iter: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CalibMethod {
    Linear,
    Mrc,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MultiModeArg {
    Pooled,
    Consensus,
}

#[derive(Debug, Args)]
struct InclusiveArgs {
    /// Utility model whose inclusive values replace the stored `s_hat`.
    #[arg(long)]
    utility: Option<PathBuf>,
    /// Use the stored true inclusive values.
    #[arg(long, conflicts_with = "utility")]
    oracle: bool,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(value_enum)]
    method: CalibMethod,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    inclusive: InclusiveArgs,
    /// Predictor column for the single-predictor methods.
    #[arg(long, default_value_t = 0)]
    predictor: usize,
    #[arg(long, value_enum, default_value_t = MultiModeArg::Pooled)]
    mode: MultiModeArg,
    /// Predictor weights for pooled aggregation, comma separated.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long, default_value_t = crate::linear::DEFAULT_RIDGE)]
    ridge: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, conflicts_with = "utility")]
    oracle: bool,
    #[arg(long)]
    utility: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Metric table.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reliability table.
    #[arg(long)]
    reliability: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AssortMethodArg {
    RevenueOrdered,
    BruteForce,
}

#[derive(Debug, Args)]
struct AssortArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fit: PathBuf,
    /// Utility model for inside utilities; defaults to the fit's, then the
    /// dataset's learned or true coefficients.
    #[arg(long)]
    utility: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AssortMethodArg::RevenueOrdered)]
    method: AssortMethodArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    exp_id: String,
    /// key = value file with ExperimentSpec, SyntheticConfig and MRC fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seeds 0..N.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    exp_id: String,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Runs the CLI on `argv` (including the program name) and returns the exit
/// code: 0 on success, 1 on usage or configuration errors, 2 on data errors.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CalibError::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::FitUtilities(a) => fit_utilities(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Assort(a) => assort(a),
        Command::Experiment(a) => experiment(a),
        Command::Verify(a) => verify_cmd(a),
    }
}

fn set_pairs(set: &[String]) -> Result<Vec<(String, String)>> {
    parse_key_values(&set.join("\n"))
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| CalibError::Config(format!("bad number {v:?}"))))
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CalibError::Config(format!("cannot read {}: {e}", path.display())))
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(io_err),
        None => Ok(()),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let mut pairs = match &a.config {
        Some(p) => parse_key_values(&read_text(p)?)?,
        None => Vec::new(),
    };
    pairs.extend(set_pairs(&a.set)?);
    if let Some(s) = a.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    if let Some(n) = a.n {
        pairs.push(("n".into(), n.to_string()));
    }
    // Later sources win.
    let pairs: Vec<(String, String)> = pairs.into_iter().collect::<BTreeMap<_, _>>().into_iter().collect();
    let (config, rest) = apply_overrides(&SyntheticConfig::default(), &pairs)?;
    reject_unknown(&rest)?;

    let world = World::new(&config)?;
    let stream = match a.split {
        Split::Train => rng::STREAM_TRAIN,
        Split::Test => rng::STREAM_TEST,
    };
    let mut ds = world.sample(config.n, stream)?;
    if let Some(r) = &a.revenues {
        let lr = parse_floats(r)?;
        let (lo, hi) = match lr[..] {
            [lo, hi] if lo.is_finite() && hi.is_finite() && lo <= hi => (lo, hi),
            _ => return Err(CalibError::Config("--revenues expects LO,HI with LO <= HI".into())),
        };
        let mut rr = rng::stream(config.seed, rng::STREAM_DECISIONS);
        let prices: Vec<f64> = (0..world.pool.len()).map(|_| rr.random_range(lo..=hi)).collect();
        for inst in &mut ds.instances {
            for it in &mut inst.items {
                it.revenue = Some(prices[it.id as usize]);
            }
        }
    }
    save_dataset(&Dataset::from_generated(&ds), &a.out)?;
    let outside = ds.instances.iter().filter(|i| i.chosen.is_none()).count();
    println!(
        "wrote {} instances to {} ({} predictors, outside share {:.4})",
        ds.instances.len(),
        a.out.display(),
        ds.num_predictors(),
        outside as f64 / ds.instances.len() as f64
    );
    Ok(())
}

fn fit_utilities(a: FitUtilitiesArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let transactions: Vec<_> = ds.instances().into_iter().filter(|i| i.chosen.is_some()).collect();
    let model = fit_conditional_mnl(&transactions, &MnlOptions { tol: a.tol, max_iter: a.max_iter })?;
    println!("transactions: {}", transactions.len());
    println!("beta_hat: {}", fmt_vec(&model.beta_hat));
    println!(
        "iterations: {}  log-likelihood: {:.6}  gradient norm: {:.3e}  converged: {}",
        model.fit_log.iterations, model.fit_log.objective, model.fit_log.grad_norm, model.fit_log.converged
    );
    if let Some(b) = &ds.header.beta_star {
        let err = b.iter().zip(&model.beta_hat).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        println!("beta error (l2): {err:.6}");
    }
    if let Ok(s_true) = ds.s_true() {
        let s_hat = inclusive_values(&model, &ds.instances())?;
        let st = inclusive_error_stats(&s_hat, &s_true)?;
        println!("bar_tau: {:.6e}  tau_s: {:.6e}", st.bar_tau, st.tau_s);
    }
    if let Some(out) = &a.out {
        save_json(&model, out)?;
    }
    Ok(())
}

/// Inclusive values from a utility model, the true column or the stored
/// `s_hat` column, in that order of precedence.
fn inclusive_column(ds: &Dataset, utility: Option<&UtilityModel>, oracle: bool) -> Result<Vec<f64>> {
    if oracle {
        ds.s_true()
    } else if let Some(m) = utility {
        inclusive_values(m, &ds.instances())
    } else {
        ds.s_hat()
    }
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let utility: Option<UtilityModel> = a.inclusive.utility.as_deref().map(load_json).transpose()?;
    let s = inclusive_column(&ds, utility.as_ref(), a.inclusive.oracle)?;
    let z = ds.z_rows();
    let mrc = MrcOptions { seed: a.seed, ..MrcOptions::default() };
    let single = |m: usize| -> Result<Vec<f64>> {
        if m >= ds.header.num_predictors {
            return Err(CalibError::Config(format!("dataset has {} predictors", ds.header.num_predictors)));
        }
        ds.predictor(m)
    };
    let calibration = match a.method {
        CalibMethod::Linear => {
            let f = fit_linear(&z, &s, &single(a.predictor)?, a.ridge, DEFAULT_SLOPE_THRESHOLD)?;
            println!("intercept: {:.6}  theta_s: {:.6}", f.a_hat, f.theta_s);
            Calibration::Linear(f)
        }
        CalibMethod::Mrc => {
            let f = fit_mrc(&z, &s, &single(a.predictor)?, &mrc)?;
            println!("rank objective (exact): {:.6}", f.objective_exact);
            Calibration::Mrc(f)
        }
        CalibMethod::Multi => {
            let weights = a.weights.as_deref().map(parse_floats).transpose()?;
            let mode = match a.mode {
                MultiModeArg::Pooled => MultiMode::Pooled,
                MultiModeArg::Consensus => MultiMode::Consensus,
            };
            let opts = MultiOptions { mode, weights, mrc, ..MultiOptions::default() };
            let y = ds.y_matrix()?;
            match mode {
                MultiMode::Pooled => {
                    let f = fit_pooled(&z, &s, &y, &opts)?;
                    println!("orientations: {:?}  rounds: {}", f.orientations, f.rounds);
                    println!("pooled objective (exact): {:.6}", f.fit.objective_exact);
                    Calibration::MultiPooled(f)
                }
                MultiMode::Consensus => {
                    let f = fit_consensus(&z, &s, &y, &opts)?;
                    println!("consensus objective (exact): {:.6}", f.objective_exact);
                    Calibration::MultiConsensus(f)
                }
            }
        }
    };
    println!("gamma_hat: {}", fmt_vec(calibration.gamma_hat()));
    if let Some(g) = &ds.header.gamma_star {
        let gh = calibration.gamma_hat();
        let err = g.iter().zip(gh).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("gamma error (l2): {err:.6}  relative: {:.6}", err / norm);
    }
    if let Some(out) = &a.out {
        save_json(&FitFile { calibration, utility }, out)?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let fit: FitFile = load_json(&a.fit)?;
    let utility: Option<UtilityModel> = match &a.utility {
        Some(p) => Some(load_json(p)?),
        None => fit.utility.clone(),
    };
    let s = inclusive_column(&ds, utility.as_ref(), a.oracle)?;
    let gamma = fit.calibration.gamma_hat();
    if gamma.len() != ds.header.d {
        return Err(CalibError::Data(format!("fit has {} coefficients, dataset d = {}", gamma.len(), ds.header.d)));
    }
    let p_hat: Vec<f64> = ds.records.iter().zip(&s).map(|(r, sk)| logistic(dot(gamma, &r.context_z) - sk)).collect();
    let labels: Vec<bool> = ds.records.iter().map(|r| r.chosen.is_none()).collect();

    let mut rows: Vec<(&str, f64)> = Vec::new();
    if let Ok(eta) = ds.eta_true() {
        let p_true: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
        rows.push(("error_q70", error_quantile(&p_true, &p_hat, 0.7)?));
    }
    rows.push(("nll", nll_default(&labels, &p_hat)?));
    let table = ece_reliability(&labels, &p_hat, a.bins)?;
    rows.push(("ece", table.ece));
    rows.push(("mean_p_hat", p_hat.iter().sum::<f64>() / p_hat.len() as f64));
    rows.push(("outside_rate", labels.iter().filter(|&&b| b).count() as f64 / labels.len() as f64));

    let mut csv = String::from("metric,value\n");
    for (k, v) in &rows {
        println!("{k}: {v:.6}");
        csv.push_str(&format!("{k},{v}\n"));
    }
    write_output(a.out.as_deref(), &csv)?;
    write_output(a.reliability.as_deref(), &table.to_csv())
}

fn assort(a: AssortArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let fit: FitFile = load_json(&a.fit)?;
    let beta: Vec<f64> = match (&a.utility, &fit.utility) {
        (Some(p), _) => load_json::<UtilityModel>(p)?.beta_hat,
        (None, Some(m)) => m.beta_hat.clone(),
        (None, None) => ds
            .header
            .beta_hat
            .clone()
            .or_else(|| ds.header.beta_star.clone())
            .ok_or_else(|| CalibError::Data("no utility coefficients: pass --utility".into()))?,
    };
    let method = match a.method {
        AssortMethodArg::RevenueOrdered => AssortmentMethod::RevenueOrdered,
        AssortMethodArg::BruteForce => AssortmentMethod::BruteForce,
    };
    let fitted = MnlParams { gamma: fit.calibration.gamma_hat(), beta: &beta };
    let truth = match (&ds.header.gamma_star, &ds.header.beta_star) {
        (Some(g), Some(b)) => Some((g.clone(), b.clone())),
        _ => None,
    };

    let mut csv = String::from("instance,selected_ids,expected_revenue_fitted,expected_revenue_true,optimal_revenue_true\n");
    let mut loss = (0.0, 0.0);
    for (k, r) in ds.records.iter().enumerate() {
        let candidates = r
            .items
            .iter()
            .map(|it| {
                let revenue = it
                    .revenue
                    .ok_or_else(|| CalibError::Data(format!("record {k} item {} has no revenue", it.id)))?;
                Ok(Candidate { id: it.id, x: ItemFeatures(it.x.clone()), revenue })
            })
            .collect::<Result<Vec<_>>>()?;
        let inst = DecisionInstance { context: crate::choice::ContextFeatures(r.context_z.clone()), candidates };
        let dec = optimal_assortment(&inst, fitted, method)?;
        let ids: Vec<String> = dec.selected.iter().map(|&i| inst.candidates[i].id.to_string()).collect();
        let (true_rev, opt_rev) = match &truth {
            Some((g, b)) => {
                let t = MnlParams { gamma: g, beta: b };
                let got = expected_revenue(&inst, &dec.selected, t)?;
                let best = optimal_assortment(&inst, t, method)?.expected_revenue;
                loss.0 += best - got;
                loss.1 += best;
                (got.to_string(), best.to_string())
            }
            None => (String::new(), String::new()),
        };
        csv.push_str(&format!("{k},{},{},{true_rev},{opt_rev}\n", ids.join(";"), dec.expected_revenue));
    }
    match &a.out {
        Some(p) => write_output(Some(p), &csv)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(csv.as_bytes()).map_err(io_err)?;
        }
    }
    if truth.is_some() && loss.1 > 0.0 {
        eprintln!("suboptimality: {:.4}%", 100.0 * loss.0 / loss.1);
    }
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let exp_id: ExpId = a.exp_id.parse()?;
    let mut pairs = match &a.config {
        Some(p) => parse_key_values(&read_text(p)?)?,
        None => Vec::new(),
    };
    if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "exp_id") {
        if v != exp_id.as_str() {
            return Err(CalibError::Config(format!("config is for {v}, not {exp_id}")));
        }
    }
    pairs.retain(|(k, _)| k != "exp_id");
    let mut spec = ExperimentSpec::preset(exp_id).with_overrides(&pairs)?;
    spec = spec.with_overrides(&set_pairs(&a.set)?)?;
    if let Some(n) = a.seeds {
        spec.seeds = (0..n).collect();
    }
    spec.output_dir = a.out;
    let result = run_experiment(&spec)?;
    if result.resumed_cells > 0 {
        println!("resumed: {} cells already complete", result.resumed_cells);
    }
    println!("wrote {} rows to {}", result.rows.len(), spec.csv_path().display());
    print_summary(&spec, &result.rows);
    Ok(())
}

fn print_summary(spec: &ExperimentSpec, rows: &[ResultRow]) {
    println!("{:>10} {:>16} {:>8} {:>12} {:>8}", "grid", "method", "seeds", "error_q70", "failed");
    for &g in &spec.grid.values {
        for &m in &spec.methods {
            let cell: Vec<_> = rows.iter().filter(|r| r.grid_point == g && r.method == m).collect();
            if cell.is_empty() {
                continue;
            }
            let ok: Vec<f64> = cell.iter().filter_map(|r| r.error_q70).collect();
            let mean = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
            println!("{:>10} {:>16} {:>8} {:>12.6} {:>8}", g, m.as_str(), cell.len(), mean, cell.len() - ok.len());
        }
    }
}

fn verify_cmd(a: VerifyArgs) -> Result<()> {
    let exp_id: ExpId = a.exp_id.parse()?;
    let csv = a.out.join(format!("{exp_id}.csv"));
    let pred = a.out.join(format!("{exp_id}_predictions.jsonl"));
    let checked = verify(&csv, &pred, a.rows, a.seed)?;
    let mut bad = 0;
    for v in &checked {
        println!(
            "{} {} grid={} seed={} stored={} recomputed={} {}",
            exp_id,
            v.row.method.as_str(),
            v.row.grid_point,
            v.row.seed,
            v.row.error_q70.unwrap_or(f64::NAN),
            v.recomputed,
            if v.matches { "ok" } else { "MISMATCH" }
        );
        bad += usize::from(!v.matches);
    }
    if bad > 0 {
        return Err(CalibError::Data(format!("{bad} of {} rows do not match", checked.len())));
    }
    Ok(())
}
