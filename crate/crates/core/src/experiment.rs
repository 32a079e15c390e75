//! Synthetic experiment runner: generate, calibrate, evaluate, write CSV.
//!
//! Each `(grid point, seed)` cell is independent and owns its random
//! streams. Cells run in parallel in chunks; rows are written in canonical
//! order after each chunk, so an interrupted run resumes where it stopped and
//! reruns produce identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::assortment::{draw_decision_instances, suboptimality, AssortmentMethod, MnlParams};
use crate::choice::{dot, logistic};
use crate::datagen::{Link, PredictorSuite, SyntheticConfig, World};
use crate::error::{CalibError, Result};
use crate::io::{apply_overrides, io_err, parse_key_values, reject_unknown};
use crate::linear::{fit_linear, DEFAULT_RIDGE, DEFAULT_SLOPE_THRESHOLD};
use crate::metrics::error_quantile;
use crate::mrc::{fit_mrc, MrcOptions};
use crate::multi::{fit_consensus, fit_pooled, logit_mean_baseline, MultiMode, MultiOptions};
use crate::rng;
use crate::utility::inclusive_error_stats;

pub const THREADS_ENV: &str = "OUTSIDE_CALIB_THREADS";
pub const CSV_HEADER: &str =
    "exp_id,method,grid_point,seed,error_q70,suboptimality_pct,bar_tau,tau_s,gamma_err_l2,runtime_ms,status";
const ERROR_QUANTILE: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpId {
    Exp1,
    Exp2,
    Exp3,
    Exp4,
    Exp5,
    Exp6,
    Custom,
}

impl ExpId {
    pub const ALL: [ExpId; 7] =
        [ExpId::Exp1, ExpId::Exp2, ExpId::Exp3, ExpId::Exp4, ExpId::Exp5, ExpId::Exp6, ExpId::Custom];

    pub fn as_str(self) -> &'static str {
        match self {
            ExpId::Exp1 => "exp1",
            ExpId::Exp2 => "exp2",
            ExpId::Exp3 => "exp3",
            ExpId::Exp4 => "exp4",
            ExpId::Exp5 => "exp5",
            ExpId::Exp6 => "exp6",
            ExpId::Custom => "custom",
        }
    }
}

impl fmt::Display for ExpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExpId {
    type Err = CalibError;
    fn from_str(s: &str) -> Result<Self> {
        ExpId::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| CalibError::Config(format!("unknown experiment {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Linear,
    Mrc,
    LinearOracle,
    MrcOracle,
    MultiPooled,
    MultiConsensus,
    LogitMean,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Linear,
        Method::Mrc,
        Method::LinearOracle,
        Method::MrcOracle,
        Method::MultiPooled,
        Method::MultiConsensus,
        Method::LogitMean,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Linear => "linear",
            Method::Mrc => "mrc",
            Method::LinearOracle => "linear_oracle",
            Method::MrcOracle => "mrc_oracle",
            Method::MultiPooled => "multi_pooled",
            Method::MultiConsensus => "multi_consensus",
            Method::LogitMean => "logit_mean",
        }
    }

    /// Uses the true inclusive values in place of `s_hat`.
    pub fn is_oracle(self) -> bool {
        matches!(self, Method::LinearOracle | Method::MrcOracle)
    }

    pub fn is_linear(self) -> bool {
        matches!(self, Method::Linear | Method::LinearOracle)
    }
}

impl FromStr for Method {
    type Err = CalibError;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| CalibError::Config(format!("unknown method {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAxis {
    N,
    SigmaEst,
    SigmaEps,
    BStar,
}

impl GridAxis {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "n" => GridAxis::N,
            "sigma_est" => GridAxis::SigmaEst,
            "sigma_eps" => GridAxis::SigmaEps,
            "b_star" => GridAxis::BStar,
            _ => return Err(CalibError::Config(format!("unknown grid axis {s}"))),
        })
    }

    fn apply(self, cfg: &mut SyntheticConfig, v: f64) -> Result<()> {
        match self {
            GridAxis::N => {
                if v < 2.0 || v.fract() != 0.0 {
                    return Err(CalibError::Config(format!("grid value n = {v} is not a count")));
                }
                cfg.n = v as usize;
            }
            GridAxis::SigmaEst => cfg.sigma_est = v,
            GridAxis::SigmaEps => cfg.sigma_eps = v,
            GridAxis::BStar => cfg.b_star = v,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub axis: GridAxis,
    pub values: Vec<f64>,
}

impl FromStr for Grid {
    type Err = CalibError;
    /// `axis:v1,v2,...`, for example `n:200,500,1000`.
    fn from_str(s: &str) -> Result<Self> {
        let (axis, vals) = s
            .split_once(':')
            .ok_or_else(|| CalibError::Config(format!("grid {s:?} is not axis:v1,v2,...")))?;
        let values = vals
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| CalibError::Config(format!("bad grid value {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Grid { axis: GridAxis::parse(axis.trim())?, values })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub exp_id: ExpId,
    pub grid: Grid,
    pub link: Link,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Linear methods run on the first `linear_seeds` seeds only.
    pub linear_seeds: usize,
    pub test_size: usize,
    /// Decision instances per cell for revenue suboptimality; 0 skips it.
    pub decision_instances: usize,
    pub m_cand: usize,
    pub revenue_min: f64,
    pub revenue_max: f64,
    pub output_dir: PathBuf,
    /// Wall-clock fit times are written when set; otherwise `runtime_ms` is 0
    /// and reruns are byte-identical.
    pub record_runtime: bool,
    pub save_predictions: bool,
    pub base: SyntheticConfig,
    pub mrc: MrcOptions,
}

const N_GRID: [f64; 9] = [200.0, 500.0, 1000.0, 2000.0, 3000.0, 4000.0, 5000.0, 6000.0, 8000.0];

impl ExperimentSpec {
    /// Defaults for one of the synthetic experiments.
    pub fn preset(exp_id: ExpId) -> Self {
        let core = vec![Method::Linear, Method::Mrc, Method::LinearOracle, Method::MrcOracle];
        let mut spec = Self {
            exp_id,
            grid: Grid { axis: GridAxis::N, values: N_GRID.to_vec() },
            link: Link::Linear,
            methods: core,
            seeds: (0..30).collect(),
            linear_seeds: 10,
            test_size: 2000,
            decision_instances: 0,
            m_cand: 50,
            revenue_min: 1.0,
            revenue_max: 10.0,
            output_dir: PathBuf::from("results"),
            record_runtime: false,
            save_predictions: true,
            base: SyntheticConfig::default(),
            mrc: MrcOptions::default(),
        };
        match exp_id {
            ExpId::Exp1 => {}
            ExpId::Exp2 => {
                spec.grid = Grid { axis: GridAxis::SigmaEst, values: (0..=10).map(|i| i as f64 / 10.0).collect() };
                spec.seeds = (0..50).collect();
            }
            ExpId::Exp3 => {
                spec.grid = Grid { axis: GridAxis::SigmaEps, values: vec![0.1, 0.5, 1.0, 2.0, 3.0, 5.0] };
                spec.seeds = (0..10).collect();
            }
            ExpId::Exp4 => {
                spec.grid = Grid { axis: GridAxis::BStar, values: vec![0.1, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0] };
                spec.seeds = (0..50).collect();
            }
            ExpId::Exp5 => spec.decision_instances = 100,
            ExpId::Exp6 => {
                spec.link = Link::MonotoneSoftplus;
                spec.base.predictors = PredictorSuite::Multi;
                spec.methods = vec![Method::MultiPooled, Method::MultiConsensus, Method::LogitMean, Method::MrcOracle];
            }
            ExpId::Custom => {
                spec.grid = Grid { axis: GridAxis::N, values: vec![2000.0] };
                spec.methods = vec![Method::Linear, Method::Mrc];
                spec.seeds = vec![0];
            }
        }
        spec
    }

    /// Applies flat `key = value` overrides: experiment fields first, then
    /// [`SyntheticConfig`] fields, then [`MrcOptions`] fields.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut spec = self.clone();
        let mut rest = Vec::new();
        for (k, v) in pairs {
            match k.as_str() {
                "grid" => spec.grid = v.parse()?,
                "base" | "mrc" => return Err(CalibError::Config(format!("unknown config key {k}"))),
                _ => rest.push((k.clone(), v.clone())),
            }
        }
        let (mut spec, rest) = apply_overrides(&spec, &rest)?;
        let (base, rest) = apply_overrides(&spec.base, &rest)?;
        let (mrc, rest) = apply_overrides(&spec.mrc, &rest)?;
        reject_unknown(&rest)?;
        spec.base = base;
        spec.mrc = mrc;
        Ok(spec)
    }

    pub fn from_config_text(text: &str) -> Result<Self> {
        let pairs = parse_key_values(text)?;
        let exp_id = match pairs.iter().find(|(k, _)| k == "exp_id") {
            Some((_, v)) => v.parse()?,
            None => ExpId::Custom,
        };
        Self::preset(exp_id).with_overrides(&pairs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.values.is_empty() {
            return Err(CalibError::Config("grid is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(CalibError::Config("no seeds".into()));
        }
        if self.methods.is_empty() {
            return Err(CalibError::Config("no methods".into()));
        }
        if self.test_size == 0 {
            return Err(CalibError::Config("test_size must be positive".into()));
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(CalibError::Config("seeds must be distinct".into()));
        }
        for &v in &self.grid.values {
            self.cell_config(v, 0)?.validate()?;
        }
        Ok(())
    }

    fn cell_config(&self, grid_value: f64, seed: u64) -> Result<SyntheticConfig> {
        let mut cfg = self.base.clone();
        cfg.link = self.link;
        cfg.seed = seed;
        self.grid.axis.apply(&mut cfg, grid_value)?;
        Ok(cfg)
    }

    /// Methods evaluated for the seed at position `seed_index`.
    fn methods_for(&self, seed_index: usize) -> impl Iterator<Item = Method> + '_ {
        self.methods.iter().copied().filter(move |m| !m.is_linear() || seed_index < self.linear_seeds)
    }

    pub fn csv_path(&self) -> PathBuf {
        self.output_dir.join(format!("{}.csv", self.exp_id))
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.output_dir.join(format!("{}_predictions.jsonl", self.exp_id))
    }

    pub fn spec_path(&self) -> PathBuf {
        self.output_dir.join(format!("{}_spec.json", self.exp_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub exp_id: ExpId,
    pub method: Method,
    pub grid_point: f64,
    pub seed: u64,
    pub error_q70: Option<f64>,
    pub suboptimality_pct: Option<f64>,
    pub bar_tau: f64,
    pub tau_s: f64,
    pub gamma_err_l2: Option<f64>,
    pub runtime_ms: u64,
    /// `ok`, or the error tag of a failed calibration.
    pub status: String,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.exp_id,
            self.method.as_str(),
            self.grid_point,
            self.seed,
            opt(self.error_q70),
            opt(self.suboptimality_pct),
            self.bar_tau,
            self.tau_s,
            opt(self.gamma_err_l2),
            self.runtime_ms,
            self.status
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || CalibError::Data(format!("malformed result row {line:?}"));
        if f.len() != 11 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let opt_num = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            exp_id: f[0].parse()?,
            method: f[1].parse()?,
            grid_point: num(f[2])?,
            seed: f[3].parse().map_err(|_| bad())?,
            error_q70: opt_num(f[4])?,
            suboptimality_pct: opt_num(f[5])?,
            bar_tau: num(f[6])?,
            tau_s: num(f[7])?,
            gamma_err_l2: opt_num(f[8])?,
            runtime_ms: f[9].parse().map_err(|_| bad())?,
            status: f[10].to_string(),
        })
    }

    fn cell(&self) -> CellKey {
        CellKey::new(self.grid_point, self.seed)
    }
}

/// Per-row test predictions, persisted so `error_q70` can be recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub exp_id: ExpId,
    pub method: Method,
    pub grid_point: f64,
    pub seed: u64,
    pub p_true: Vec<f64>,
    pub p_hat: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct CellKey {
    grid_bits: u64,
    seed: u64,
}

impl CellKey {
    fn new(grid_point: f64, seed: u64) -> Self {
        Self { grid_bits: grid_point.to_bits(), seed }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    /// Cells already present in the output and skipped by this run.
    pub resumed_cells: usize,
}

struct CellOutput {
    rows: Vec<ResultRow>,
    predictions: Vec<PredictionRecord>,
}

fn l2_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn run_cell(spec: &ExperimentSpec, grid_value: f64, seed_index: usize) -> CellOutput {
    let seed = spec.seeds[seed_index];
    let methods: Vec<Method> = spec.methods_for(seed_index).collect();
    let fail_all = |e: CalibError| CellOutput {
        rows: methods
            .iter()
            .map(|&method| ResultRow {
                exp_id: spec.exp_id,
                method,
                grid_point: grid_value,
                seed,
                error_q70: None,
                suboptimality_pct: None,
                bar_tau: 0.0,
                tau_s: 0.0,
                gamma_err_l2: None,
                runtime_ms: 0,
                status: e.tag().to_string(),
            })
            .collect(),
        predictions: Vec::new(),
    };
    match run_cell_inner(spec, grid_value, seed, &methods) {
        Ok(out) => out,
        Err(e) => fail_all(e),
    }
}

fn run_cell_inner(spec: &ExperimentSpec, grid_value: f64, seed: u64, methods: &[Method]) -> Result<CellOutput> {
    let cfg = spec.cell_config(grid_value, seed)?;
    let world = World::new(&cfg)?;
    let train = world.sample(cfg.n, rng::STREAM_TRAIN)?;
    let test = world.sample(spec.test_size, rng::STREAM_TEST)?;
    let stats = inclusive_error_stats(&train.s_hat, &train.s_true)?;
    let z = train.z_rows();
    let z_test = test.z_rows();
    let p_true = test.p0_true();
    let y_single = if train.num_predictors() == 1 {
        train.predictor(0)
    } else {
        logit_mean_baseline(&train.predictor_logits)?
    };
    let decisions = if spec.decision_instances > 0 {
        let mut drng = rng::stream(cfg.seed, rng::STREAM_DECISIONS);
        Some(draw_decision_instances(
            &world,
            spec.decision_instances,
            spec.m_cand,
            (spec.revenue_min, spec.revenue_max),
            &mut drng,
        )?)
    } else {
        None
    };
    let beta_plug_in = world.beta_hat.clone().unwrap_or_else(|| world.beta_star.clone());
    let mut mrc = spec.mrc.clone();
    mrc.seed = rng::derive_seed(seed, grid_value.to_bits());

    let mut out = CellOutput { rows: Vec::new(), predictions: Vec::new() };
    for &method in methods {
        let oracle = method.is_oracle();
        let s_train = if oracle { &train.s_true } else { &train.s_hat };
        let started = Instant::now();
        let fitted: Result<Vec<f64>> = match method {
            Method::Linear | Method::LinearOracle => {
                fit_linear(&z, s_train, &y_single, DEFAULT_RIDGE, DEFAULT_SLOPE_THRESHOLD).map(|f| f.gamma_hat)
            }
            Method::Mrc | Method::MrcOracle => fit_mrc(&z, s_train, &y_single, &mrc).map(|f| f.gamma_hat),
            Method::LogitMean => logit_mean_baseline(&train.predictor_logits)
                .and_then(|y| fit_mrc(&z, s_train, &y, &mrc))
                .map(|f| f.gamma_hat),
            Method::MultiPooled => {
                let opts = MultiOptions { mode: MultiMode::Pooled, mrc: mrc.clone(), ..Default::default() };
                fit_pooled(&z, s_train, &train.predictor_logits, &opts).map(|f| f.fit.gamma_hat)
            }
            Method::MultiConsensus => {
                let opts = MultiOptions { mode: MultiMode::Consensus, mrc: mrc.clone(), ..Default::default() };
                fit_consensus(&z, s_train, &train.predictor_logits, &opts).map(|f| f.gamma_hat)
            }
        };
        let runtime_ms = if spec.record_runtime { started.elapsed().as_millis() as u64 } else { 0 };
        let (bar_tau, tau_s) = if oracle { (0.0, 0.0) } else { (stats.bar_tau, stats.tau_s) };
        let mut row = ResultRow {
            exp_id: spec.exp_id,
            method,
            grid_point: grid_value,
            seed,
            error_q70: None,
            suboptimality_pct: None,
            bar_tau,
            tau_s,
            gamma_err_l2: None,
            runtime_ms,
            status: "ok".into(),
        };
        let gamma_hat = match fitted {
            Ok(g) => g,
            Err(e) => {
                row.status = e.tag().into();
                out.rows.push(row);
                continue;
            }
        };
        let s_test = if oracle { &test.s_true } else { &test.s_hat };
        let p_hat: Vec<f64> = z_test.iter().zip(s_test).map(|(zk, sk)| logistic(dot(&gamma_hat, zk) - sk)).collect();
        row.error_q70 = Some(error_quantile(&p_true, &p_hat, ERROR_QUANTILE)?);
        row.gamma_err_l2 = Some(l2_error(&gamma_hat, &world.gamma_star));
        if let Some(instances) = &decisions {
            let beta_fit = if oracle { &world.beta_star } else { &beta_plug_in };
            row.suboptimality_pct = Some(suboptimality(
                instances,
                MnlParams { gamma: &world.gamma_star, beta: &world.beta_star },
                MnlParams { gamma: &gamma_hat, beta: beta_fit },
                AssortmentMethod::RevenueOrdered,
            )?);
        }
        if spec.save_predictions {
            out.predictions.push(PredictionRecord {
                exp_id: spec.exp_id,
                method,
                grid_point: grid_value,
                seed,
                p_true: p_true.clone(),
                p_hat,
            });
        }
        out.rows.push(row);
    }
    Ok(out)
}

fn thread_count() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CalibError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Reads complete rows of an earlier run and rewrites both output files so
/// they hold only fully finished cells.
fn load_finished(spec: &ExperimentSpec) -> Result<(Vec<ResultRow>, BTreeSet<CellKey>)> {
    let csv = spec.csv_path();
    if !csv.exists() {
        return Ok((Vec::new(), BTreeSet::new()));
    }
    let text = fs::read_to_string(&csv).map_err(io_err)?;
    let mut lines = text.split_inclusive('\n');
    match lines.next() {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        _ => return Err(CalibError::Data(format!("{} has an unexpected header", csv.display()))),
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| l.ends_with('\n')) {
        rows.push(ResultRow::from_csv(line.trim_end())?);
    }
    let expected: BTreeMap<CellKey, usize> = spec
        .grid
        .values
        .iter()
        .flat_map(|&g| (0..spec.seeds.len()).map(move |i| (g, i)))
        .map(|(g, i)| (CellKey::new(g, spec.seeds[i]), spec.methods_for(i).count()))
        .collect();
    let mut counts: BTreeMap<CellKey, usize> = BTreeMap::new();
    for r in &rows {
        if r.exp_id != spec.exp_id || !expected.contains_key(&r.cell()) {
            return Err(CalibError::Data(format!("{} belongs to a different experiment spec", csv.display())));
        }
        *counts.entry(r.cell()).or_default() += 1;
    }
    let done: BTreeSet<CellKey> = counts.into_iter().filter(|(k, c)| expected[k] == *c).map(|(k, _)| k).collect();
    rows.retain(|r| done.contains(&r.cell()));

    let mut w = BufWriter::new(File::create(&csv).map_err(io_err)?);
    writeln!(w, "{CSV_HEADER}").map_err(io_err)?;
    for r in &rows {
        writeln!(w, "{}", r.to_csv()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;

    let pred = spec.predictions_path();
    if spec.save_predictions && pred.exists() {
        let kept: Vec<String> = BufReader::new(File::open(&pred).map_err(io_err)?)
            .lines()
            .map_while(|l| l.ok())
            .filter(|l| {
                serde_json::from_str::<PredictionRecord>(l)
                    .is_ok_and(|p| done.contains(&CellKey::new(p.grid_point, p.seed)))
            })
            .collect();
        let mut w = BufWriter::new(File::create(&pred).map_err(io_err)?);
        for l in kept {
            writeln!(w, "{l}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
    }
    Ok((rows, done))
}

/// Runs every `(grid point, seed)` cell of `spec` not already present in
/// its output directory and appends the rows.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    fs::create_dir_all(&spec.output_dir).map_err(io_err)?;
    let (mut rows, done) = load_finished(spec)?;
    let spec_json = serde_json::to_string_pretty(spec).map_err(|e| CalibError::Data(e.to_string()))?;
    fs::write(spec.spec_path(), spec_json + "\n").map_err(io_err)?;

    let cells: Vec<(f64, usize)> = spec
        .grid
        .values
        .iter()
        .flat_map(|&g| (0..spec.seeds.len()).map(move |i| (g, i)))
        .filter(|&(g, i)| !done.contains(&CellKey::new(g, spec.seeds[i])))
        .collect();

    let csv_path = spec.csv_path();
    let mut csv = OpenOptions::new().create(true).append(true).open(&csv_path).map_err(io_err)?;
    if done.is_empty() {
        csv.set_len(0).map_err(io_err)?;
        writeln!(csv, "{CSV_HEADER}").map_err(io_err)?;
    }
    let mut pred = if spec.save_predictions {
        let f = OpenOptions::new().create(true).append(true).open(spec.predictions_path()).map_err(io_err)?;
        if done.is_empty() {
            f.set_len(0).map_err(io_err)?;
        }
        Some(BufWriter::new(f))
    } else {
        None
    };

    let threads = thread_count()?;
    #[cfg(feature = "parallel")]
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| CalibError::Config(e.to_string()))?
    };
    #[cfg(feature = "parallel")]
    let chunk = pool.current_num_threads().max(1);
    #[cfg(not(feature = "parallel"))]
    let chunk = threads.unwrap_or(1);

    for batch in cells.chunks(chunk) {
        #[cfg(feature = "parallel")]
        let outputs: Vec<CellOutput> = {
            use rayon::prelude::*;
            pool.install(|| batch.par_iter().map(|&(g, i)| run_cell(spec, g, i)).collect())
        };
        #[cfg(not(feature = "parallel"))]
        let outputs: Vec<CellOutput> = batch.iter().map(|&(g, i)| run_cell(spec, g, i)).collect();

        let mut text = String::new();
        for o in &outputs {
            for r in &o.rows {
                text.push_str(&r.to_csv());
                text.push('\n');
            }
        }
        if let Some(w) = pred.as_mut() {
            for o in &outputs {
                for p in &o.predictions {
                    serde_json::to_writer(&mut *w, p).map_err(|e| CalibError::Data(e.to_string()))?;
                    w.write_all(b"\n").map_err(io_err)?;
                }
            }
            w.flush().map_err(io_err)?;
        }
        csv.write_all(text.as_bytes()).map_err(io_err)?;
        csv.flush().map_err(io_err)?;
        rows.extend(outputs.into_iter().flat_map(|o| o.rows));
    }
    Ok(ExperimentResult { rows, resumed_cells: done.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedRow {
    pub row: ResultRow,
    pub recomputed: f64,
    pub matches: bool,
}

/// Recomputes `error_q70` for `count` randomly chosen successful rows from
/// the persisted predictions.
pub fn verify(csv_path: &Path, predictions_path: &Path, count: usize, seed: u64) -> Result<Vec<VerifiedRow>> {
    let text = fs::read_to_string(csv_path).map_err(|e| CalibError::Data(format!("{}: {e}", csv_path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(CalibError::Data(format!("{} has an unexpected header", csv_path.display())));
    }
    let rows: Vec<ResultRow> = lines
        .map(ResultRow::from_csv)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|r| r.error_q70.is_some())
        .collect();
    if rows.is_empty() {
        return Err(CalibError::Data("no successful rows to verify".into()));
    }
    let mut r = rng::stream(seed, rng::STREAM_OPTIMIZER);
    let mut picks = index::sample(&mut r, rows.len(), count.min(rows.len())).into_vec();
    picks.sort_unstable();
    let wanted: BTreeMap<(Method, CellKey), usize> =
        picks.iter().map(|&i| ((rows[i].method, rows[i].cell()), i)).collect();

    let f = File::open(predictions_path)
        .map_err(|e| CalibError::Data(format!("{}: {e}", predictions_path.display())))?;
    let mut found: BTreeMap<usize, f64> = BTreeMap::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err)?;
        let p: PredictionRecord = serde_json::from_str(&line).map_err(|e| CalibError::Data(e.to_string()))?;
        if let Some(&i) = wanted.get(&(p.method, CellKey::new(p.grid_point, p.seed))) {
            found.insert(i, error_quantile(&p.p_true, &p.p_hat, ERROR_QUANTILE)?);
        }
    }
    picks
        .into_iter()
        .map(|i| {
            let recomputed = *found
                .get(&i)
                .ok_or_else(|| CalibError::Data(format!("no predictions stored for row {}", rows[i].to_csv())))?;
            let stored = rows[i].error_q70.expect("filtered to successful rows");
            Ok(VerifiedRow { row: rows[i].clone(), recomputed, matches: (stored - recomputed).abs() <= 1e-12 })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_grids() {
        assert_eq!(ExperimentSpec::preset(ExpId::Exp1).grid.values, N_GRID.to_vec());
        let e2 = ExperimentSpec::preset(ExpId::Exp2).grid;
        assert_eq!(e2.axis, GridAxis::SigmaEst);
        assert_eq!(e2.values.len(), 11);
        assert_eq!(e2.values[3], 0.3);
        assert_eq!(ExperimentSpec::preset(ExpId::Exp3).grid.values, vec![0.1, 0.5, 1.0, 2.0, 3.0, 5.0]);
        assert_eq!(ExperimentSpec::preset(ExpId::Exp4).grid.values, vec![0.1, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0]);
        assert_eq!(ExperimentSpec::preset(ExpId::Exp5).decision_instances, 100);
        assert_eq!(ExperimentSpec::preset(ExpId::Exp6).base.predictors, PredictorSuite::Multi);
    }

    #[test]
    fn grid_parsing() {
        let g: Grid = "n:200, 500".parse().unwrap();
        assert_eq!(g, Grid { axis: GridAxis::N, values: vec![200.0, 500.0] });
        assert!("n".parse::<Grid>().is_err());
        assert!("q:1".parse::<Grid>().is_err());
    }

    #[test]
    fn config_overrides() {
        let spec = ExperimentSpec::from_config_text(
            "exp_id = exp3\ngrid = sigma_eps:0.5\nseeds = 4,5\nmethods = linear,mrc_oracle\nd = 6\nanneal = 1,10\n",
        )
        .unwrap();
        assert_eq!(spec.exp_id, ExpId::Exp3);
        assert_eq!(spec.seeds, vec![4, 5]);
        assert_eq!(spec.methods, vec![Method::Linear, Method::MrcOracle]);
        assert_eq!(spec.base.d, 6);
        assert_eq!(spec.mrc.anneal, vec![1.0, 10.0]);
        assert!(ExperimentSpec::from_config_text("bogus = 1").is_err());
    }

    #[test]
    fn row_csv_round_trip() {
        let row = ResultRow {
            exp_id: ExpId::Exp5,
            method: Method::MrcOracle,
            grid_point: 0.1,
            seed: 3,
            error_q70: Some(0.012345678901234568),
            suboptimality_pct: None,
            bar_tau: 0.0,
            tau_s: 0.0,
            gamma_err_l2: Some(1.5),
            runtime_ms: 0,
            status: "ok".into(),
        };
        let line = row.to_csv();
        assert_eq!(line.split(',').count(), CSV_HEADER.split(',').count());
        assert_eq!(ResultRow::from_csv(&line).unwrap(), row);
    }
}
