//! File formats: line-delimited datasets, flat `key = value` configs and
//! JSON fit files.
//!
//! Floats are written with the shortest representation that parses back to
//! the same `f64`, so datasets round-trip exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::choice::{ChoiceInstance, ContextFeatures, ItemFeatures, OfferedItem};
use crate::datagen::{GeneratedDataset, SyntheticConfig};
use crate::error::{CalibError, Result};
use crate::linear::LinearFit;
use crate::mrc::MrcFit;
use crate::multi::PooledFit;
use crate::utility::UtilityModel;

pub const DATASET_FORMAT: &str = "outside-calib-dataset";
pub const DATASET_VERSION: u32 = 1;

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub num_predictors: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_star: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_star: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_hat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_matrix_w: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: u32,
    pub x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revenue: Option<f64>,
}

/// One instance per line after the header. Ground-truth fields are optional
/// so observational data can use the same format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub context_z: Vec<f64>,
    pub items: Vec<ItemRecord>,
    pub chosen: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_true: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_true: Option<f64>,
    #[serde(default)]
    pub y: Vec<f64>,
}

impl DatasetRecord {
    pub fn instance(&self) -> ChoiceInstance {
        ChoiceInstance {
            context: ContextFeatures(self.context_z.clone()),
            items: self
                .items
                .iter()
                .map(|it| OfferedItem { id: it.id, x: ItemFeatures(it.x.clone()), revenue: it.revenue })
                .collect(),
            chosen: self.chosen,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

fn column(records: &[DatasetRecord], what: &str, f: impl Fn(&DatasetRecord) -> Option<f64>) -> Result<Vec<f64>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| f(r).ok_or_else(|| CalibError::Data(format!("record {i} has no {what}"))))
        .collect()
}

impl Dataset {
    pub fn from_generated(ds: &GeneratedDataset) -> Self {
        let records = ds
            .instances
            .iter()
            .enumerate()
            .map(|(k, inst)| DatasetRecord {
                context_z: inst.context.0.clone(),
                items: inst
                    .items
                    .iter()
                    .map(|it| ItemRecord { id: it.id, x: it.x.0.clone(), revenue: it.revenue })
                    .collect(),
                chosen: inst.chosen,
                s_true: Some(ds.s_true[k]),
                s_hat: Some(ds.s_hat[k]),
                eta_true: Some(ds.eta_true[k]),
                y: ds.predictor_logits[k].clone(),
            })
            .collect();
        Self {
            header: DatasetHeader {
                format: DATASET_FORMAT.into(),
                version: DATASET_VERSION,
                n: ds.instances.len(),
                d: ds.gamma_star.len(),
                p: ds.beta_star.len(),
                num_predictors: ds.num_predictors(),
                config: Some(ds.config.clone()),
                beta_star: Some(ds.beta_star.clone()),
                gamma_star: Some(ds.gamma_star.clone()),
                beta_hat: ds.beta_hat.clone(),
                mix_matrix_w: Some(ds.mix_matrix_w.clone()),
            },
            records,
        }
    }

    pub fn instances(&self) -> Vec<ChoiceInstance> {
        self.records.iter().map(DatasetRecord::instance).collect()
    }

    pub fn z_rows(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.context_z.clone()).collect()
    }

    pub fn s_true(&self) -> Result<Vec<f64>> {
        column(&self.records, "s_true", |r| r.s_true)
    }

    pub fn s_hat(&self) -> Result<Vec<f64>> {
        column(&self.records, "s_hat", |r| r.s_hat)
    }

    pub fn eta_true(&self) -> Result<Vec<f64>> {
        column(&self.records, "eta_true", |r| r.eta_true)
    }

    /// `n x M` predictor logits.
    pub fn y_matrix(&self) -> Result<Vec<Vec<f64>>> {
        if self.records.iter().any(|r| r.y.len() != self.header.num_predictors || r.y.is_empty()) {
            return Err(CalibError::Data(format!(
                "every record needs {} predictor logits",
                self.header.num_predictors
            )));
        }
        Ok(self.records.iter().map(|r| r.y.clone()).collect())
    }

    pub fn predictor(&self, m: usize) -> Result<Vec<f64>> {
        Ok(self.y_matrix()?.into_iter().map(|row| row[m]).collect())
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.format != DATASET_FORMAT || h.version != DATASET_VERSION {
            return Err(CalibError::Data(format!("unsupported dataset format {} v{}", h.format, h.version)));
        }
        if h.n != self.records.len() {
            return Err(CalibError::Data(format!("header says {} records, found {}", h.n, self.records.len())));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.context_z.len() != h.d || r.items.iter().any(|it| it.x.len() != h.p) {
                return Err(CalibError::Data(format!("record {i} does not match header dimensions")));
            }
            r.instance().validate().map_err(|e| CalibError::Data(format!("record {i}: {e}")))?;
        }
        Ok(())
    }
}

pub fn write_dataset<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    write_line(&ds.header, &mut out)?;
    for r in &ds.records {
        write_line(r, &mut out)?;
    }
    out.flush().map_err(io_err)
}

fn write_line<T: Serialize, W: Write>(value: &T, out: &mut W) -> Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(|e| CalibError::Data(e.to_string()))?;
    out.write_all(b"\n").map_err(io_err)
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
    let (_, first) = lines.next().ok_or_else(|| CalibError::Data("empty dataset file".into()))?;
    let header: DatasetHeader = parse_line(&first.map_err(io_err)?, 1)?;
    let mut records = Vec::with_capacity(header.n);
    for (i, line) in lines {
        records.push(parse_line(&line.map_err(io_err)?, i + 1)?);
    }
    let ds = Dataset { header, records };
    ds.validate()?;
    Ok(ds)
}

fn parse_line<T: DeserializeOwned>(line: &str, lineno: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| CalibError::Data(format!("line {lineno}: {e}")))
}

pub(crate) fn io_err(e: std::io::Error) -> CalibError {
    CalibError::Data(format!("i/o error: {e}"))
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_dataset(ds, File::create(path).map_err(io_err)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path).map_err(|e| {
        CalibError::Data(format!("cannot open {}: {e}", path.display()))
    })?))
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CalibError::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(CalibError::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(CalibError::Config(format!("line {}: duplicate key {k}", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn scalar_like(template: &Value, key: &str, raw: &str) -> Result<Value> {
    let bad = || CalibError::Config(format!("invalid value {raw:?} for {key}"));
    Ok(match template {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(n) if n.is_i64() => Value::from(raw.parse::<i64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(bad)?
        }
        Value::Null => match raw.parse::<f64>() {
            Ok(v) => serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(bad)?,
            Err(_) => Value::String(raw.to_string()),
        },
        _ => Value::String(raw.to_string()),
    })
}

/// Overrides the fields of `base` named in `pairs`, returning the updated
/// value and the pairs whose key is not a field of `T`. Values are typed by
/// the current field; lists are comma separated.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(
    base: &T,
    pairs: &[(String, String)],
) -> Result<(T, Vec<(String, String)>)> {
    let mut obj: Map<String, Value> = match serde_json::to_value(base) {
        Ok(Value::Object(m)) => m,
        _ => return Err(CalibError::Config("overrides need a struct".into())),
    };
    let mut rest = Vec::new();
    for (k, raw) in pairs {
        let Some(current) = obj.get(k) else {
            rest.push((k.clone(), raw.clone()));
            continue;
        };
        let value = match current {
            Value::Array(items) => {
                let template = items.first().cloned().unwrap_or(Value::Null);
                let parts: Vec<&str> = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                Value::Array(parts.into_iter().map(|p| scalar_like(&template, k, p)).collect::<Result<_>>()?)
            }
            other => scalar_like(other, k, raw)?,
        };
        obj.insert(k.clone(), value);
    }
    let out = serde_json::from_value(Value::Object(obj)).map_err(|e| CalibError::Config(e.to_string()))?;
    Ok((out, rest))
}

pub fn reject_unknown(rest: &[(String, String)]) -> Result<()> {
    match rest.first() {
        None => Ok(()),
        Some((k, _)) => Err(CalibError::Config(format!("unknown config key {k}"))),
    }
}

/// Reads a synthetic-data config; every key must be a field of [`SyntheticConfig`].
pub fn load_synthetic_config(path: &Path) -> Result<SyntheticConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CalibError::Config(format!("cannot read {}: {e}", path.display())))?;
    let (cfg, rest) = apply_overrides(&SyntheticConfig::default(), &parse_key_values(&text)?)?;
    reject_unknown(&rest)?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Calibration {
    Linear(LinearFit),
    Mrc(MrcFit),
    MultiPooled(PooledFit),
    MultiConsensus(MrcFit),
}

impl Calibration {
    pub fn gamma_hat(&self) -> &[f64] {
        match self {
            Calibration::Linear(f) => &f.gamma_hat,
            Calibration::Mrc(f) | Calibration::MultiConsensus(f) => &f.gamma_hat,
            Calibration::MultiPooled(f) => &f.fit.gamma_hat,
        }
    }
}

/// A calibration together with the utility model used for `s_hat`, when the
/// inclusive values were computed rather than read from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub calibration: Calibration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility: Option<UtilityModel>,
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CalibError::Data(e.to_string()))?;
    w.write_all(b"\n").map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| CalibError::Data(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| CalibError::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, ErrorMode, Link};

    #[test]
    fn dataset_round_trip_is_exact() {
        let cfg = SyntheticConfig { n: 40, item_pool_size: 60, d_ctx: 5, d: 4, seed: 11, ..Default::default() };
        let ds = Dataset::from_generated(&generate(&cfg).unwrap());
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 41);
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn header_dimensions_are_checked() {
        let cfg = SyntheticConfig { n: 5, item_pool_size: 30, d_ctx: 3, d: 3, ..Default::default() };
        let mut ds = Dataset::from_generated(&generate(&cfg).unwrap());
        ds.header.n = 6;
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert!(matches!(read_dataset(&buf[..]), Err(CalibError::Data(_))));
    }

    #[test]
    fn key_values() {
        let kv = parse_key_values("# comment\n n = 500 \n\nlink=monotone_softplus # trailing\n").unwrap();
        assert_eq!(kv, vec![("n".into(), "500".into()), ("link".into(), "monotone_softplus".into())]);
        assert!(parse_key_values("n 500").is_err());
        assert!(parse_key_values("n = 1\nn = 2").is_err());
    }

    #[test]
    fn overrides_are_typed() {
        let pairs = parse_key_values("n = 500\nsigma_est = 0.25\nerror_mode = additive\nlink = monotone_softplus\ntruncate_contexts = false").unwrap();
        let (cfg, rest) = apply_overrides(&SyntheticConfig::default(), &pairs).unwrap();
        assert!(rest.is_empty());
        assert_eq!(cfg.n, 500);
        assert_eq!(cfg.sigma_est, 0.25);
        assert_eq!(cfg.error_mode, ErrorMode::Additive);
        assert_eq!(cfg.link, Link::MonotoneSoftplus);
        assert!(!cfg.truncate_contexts);
        let (_, rest) = apply_overrides(&SyntheticConfig::default(), &[("bogus".into(), "1".into())]).unwrap();
        assert!(reject_unknown(&rest).is_err());
        assert!(apply_overrides(&SyntheticConfig::default(), &[("n".into(), "-3".into())]).is_err());
        assert!(apply_overrides(&SyntheticConfig::default(), &[("link".into(), "cubic".into())]).is_err());
    }
}
