//! Time series containers, CSV/manifest ingestion, and synthetic
//! generators.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// A uniformly sampled, possibly multichannel series. Non-finite values
/// mark unobserved steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub id: String,
    /// `length × channels`.
    pub values: Mat,
    /// Sampling period in arbitrary units.
    pub interval: f64,
    /// Steps `0..split` are history, `split..` held out.
    pub split: usize,
    pub timestamps: Vec<String>,
}

impl TimeSeries {
    pub fn new(id: impl Into<String>, values: Mat, interval: f64) -> Result<Self> {
        let len = values.rows;
        let ts = Self {
            id: id.into(),
            timestamps: (0..len).map(|t| t.to_string()).collect(),
            values,
            interval,
            split: len,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn univariate(id: impl Into<String>, values: Vec<f64>, interval: f64) -> Result<Self> {
        let n = values.len();
        Self::new(id, Mat::from_vec(n, 1, values)?, interval)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.rows == 0 || self.values.cols == 0 {
            return Err(Error::Validation(format!("series `{}` is empty", self.id)));
        }
        if !(self.interval > 0.0) {
            return Err(Error::Validation(format!("series `{}` has non-positive interval", self.id)));
        }
        if self.split > self.values.rows {
            return Err(Error::Validation(format!(
                "series `{}`: split {} beyond length {}",
                self.id, self.split, self.values.rows
            )));
        }
        if self.timestamps.len() != self.values.rows {
            return Err(Error::Validation(format!("series `{}`: timestamp count mismatch", self.id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.rows
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.values.get(t, c)).collect()
    }

    pub fn with_split(mut self, split: usize) -> Result<Self> {
        self.split = split;
        self.validate()?;
        Ok(self)
    }

    /// Every `factor`-th step, starting from the first. The split is mapped
    /// to the first retained step at or after the original split.
    pub fn subsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Validation("subsampling factor must be positive".into()));
        }
        let keep: Vec<usize> = (0..self.len()).step_by(factor).collect();
        let mut values = Mat::zeros(keep.len(), self.channels());
        for (r, &t) in keep.iter().enumerate() {
            values.row_mut(r).copy_from_slice(self.values.row(t));
        }
        Ok(Self {
            id: format!("{}@{}", self.id, factor),
            values,
            interval: self.interval * factor as f64,
            split: self.split.div_ceil(factor),
            timestamps: keep.iter().map(|&t| self.timestamps[t].clone()).collect(),
        })
    }
}

/// Per-task metadata that cannot be inferred from the values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub id: String,
    /// Steps per season.
    pub seasonality: f64,
    /// Forecast length in steps.
    pub horizon: usize,
    #[serde(default = "default_interval")]
    pub interval: f64,
    /// Train/test boundary; defaults to `length − horizon`.
    #[serde(default)]
    pub split: Option<usize>,
}

fn default_interval() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tasks: Vec<TaskEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        })?;
        for t in &m.tasks {
            if !(t.seasonality > 0.0) {
                return Err(Error::Domain(format!("task `{}`: seasonality must be positive", t.id)));
            }
            if t.horizon == 0 {
                return Err(Error::Validation(format!("task `{}`: horizon must be at least 1", t.id)));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn task(&self, id: &str) -> Option<&TaskEntry> {
        self.tasks.iter().find(|t| t.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvFormat {
    /// `id,timestamp,channel,value`
    CsvLong,
    /// `timestamp,ch0,ch1,...`, one series per file
    CsvWide,
}

impl std::str::FromStr for CsvFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv_long" | "long" => Ok(Self::CsvLong),
            "csv_wide" | "wide" => Ok(Self::CsvWide),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse { location: format!("{}:{}", path.display(), line), message: message.into() }
}

fn parse_cell(path: &Path, line: u64, cell: &str) -> Result<f64> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    cell.parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("non-numeric value `{cell}`")))
}

/// Reads a dataset file. The manifest, when given, supplies interval and
/// split for each series id; series absent from the manifest keep their
/// full length as history.
pub fn load_dataset(path: &Path, format: CsvFormat, manifest: Option<&Manifest>) -> Result<Vec<TimeSeries>> {
    let mut series = match format {
        CsvFormat::CsvLong => read_long(path)?,
        CsvFormat::CsvWide => {
            let id = manifest
                .filter(|m| m.tasks.len() == 1)
                .map(|m| m.tasks[0].id.clone())
                .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            vec![read_wide(path, &id)?]
        }
    };
    if let Some(m) = manifest {
        for s in &mut series {
            if let Some(task) = m.task(&s.id) {
                s.interval = task.interval;
                s.split = task.split.unwrap_or(s.len().saturating_sub(task.horizon));
                s.validate()?;
            }
        }
    }
    Ok(series)
}

fn read_long(path: &Path) -> Result<Vec<TimeSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(path, 1, format!("missing column `{name}`")))
    };
    let (ci, ct, cc, cv) = (col("id")?, col("timestamp")?, col("channel")?, col("value")?);

    // id -> (timestamp order, channel order, cells)
    struct Acc {
        stamps: Vec<String>,
        stamp_idx: HashMap<String, usize>,
        channels: Vec<String>,
        cells: HashMap<(usize, usize), f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut accs: HashMap<String, Acc> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |c: usize| rec.get(c).ok_or_else(|| parse_err(path, line, "short row"));
        let (id, ts, ch) = (field(ci)?.to_string(), field(ct)?.to_string(), field(cc)?.to_string());
        let v = parse_cell(path, line, field(cv)?)?;
        let acc = accs.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Acc { stamps: vec![], stamp_idx: HashMap::new(), channels: vec![], cells: HashMap::new() }
        });
        let t = *acc.stamp_idx.entry(ts.clone()).or_insert_with(|| {
            acc.stamps.push(ts.clone());
            acc.stamps.len() - 1
        });
        let c = match acc.channels.iter().position(|x| *x == ch) {
            Some(c) => c,
            None => {
                acc.channels.push(ch.clone());
                acc.channels.len() - 1
            }
        };
        if acc.cells.insert((t, c), v).is_some() {
            return Err(parse_err(path, line, format!("duplicate timestamp `{ts}` for series `{id}` channel `{ch}`")));
        }
    }
    order
        .into_iter()
        .map(|id| {
            let acc = &accs[&id];
            let (len, nc) = (acc.stamps.len(), acc.channels.len());
            let mut values = Mat::filled(len, nc, f64::NAN);
            for (&(t, c), &v) in &acc.cells {
                values.data[t * nc + c] = v;
            }
            let ts = TimeSeries { id, values, interval: 1.0, split: len, timestamps: acc.stamps.clone() };
            ts.validate()?;
            Ok(ts)
        })
        .collect()
}

fn read_wide(path: &Path, id: &str) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.get(0) != Some("timestamp") {
        return Err(parse_err(path, 1, "first column must be `timestamp`"));
    }
    let nc = headers.len() - 1;
    if nc == 0 {
        return Err(parse_err(path, 1, "no value columns"));
    }
    let mut seen = HashSet::new();
    let mut stamps = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != nc + 1 {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", nc + 1, rec.len())));
        }
        let ts = rec[0].to_string();
        if !seen.insert(ts.clone()) {
            return Err(parse_err(path, line, format!("duplicate timestamp `{ts}`")));
        }
        stamps.push(ts);
        for c in 1..=nc {
            data.push(parse_cell(path, line, &rec[c])?);
        }
    }
    let len = stamps.len();
    let ts = TimeSeries {
        id: id.to_string(),
        values: Mat::from_vec(len, nc, data)?,
        interval: 1.0,
        split: len,
        timestamps: stamps,
    };
    ts.validate()?;
    Ok(ts)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    parse_err(path, line, e.to_string())
}

fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

/// Writes series in long format. Values round-trip exactly.
pub fn save_long(path: &Path, series: &[TimeSeries]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["id", "timestamp", "channel", "value"]).map_err(|e| csv_err(path, e))?;
    for s in series {
        for t in 0..s.len() {
            for c in 0..s.channels() {
                let rec = [s.id.clone(), s.timestamps[t].clone(), format!("ch{c}"), fmt_value(s.values.get(t, c))];
                w.write_record(&rec).map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes one series in wide format.
pub fn save_wide(path: &Path, series: &TimeSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["timestamp".to_string()];
    header.extend((0..series.channels()).map(|c| format!("ch{c}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for t in 0..series.len() {
        let mut rec = vec![series.timestamps[t].clone()];
        rec.extend(series.values.row(t).iter().map(|&v| fmt_value(v)));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Parameters of the sinusoid-mixture generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinmixParams {
    pub min_components: usize,
    pub max_components: usize,
    /// If set, the first component always has exactly this period.
    pub anchor_period: Option<f64>,
    pub period_min: f64,
    pub period_max: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub noise_std: f64,
    /// Standard deviation of the increments of an added random walk.
    pub walk_std: f64,
    pub level: f64,
}

impl Default for SinmixParams {
    fn default() -> Self {
        Self {
            min_components: 1,
            max_components: 4,
            anchor_period: None,
            period_min: 4.0,
            period_max: 96.0,
            amplitude_min: 0.5,
            amplitude_max: 2.0,
            noise_std: 0.1,
            walk_std: 0.0,
            level: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub period: f64,
    pub phase: f64,
    pub amplitude: f64,
}

impl SinmixParams {
    /// Draws the component list exactly as [`generate_synthetic`] does.
    pub fn components(&self, rng: &mut ChaCha8Rng) -> Vec<Sinusoid> {
        let lo = self.min_components.clamp(1, 4);
        let hi = self.max_components.clamp(lo, 4);
        let count = rng.random_range(lo..=hi);
        (0..count)
            .map(|i| {
                let period = match (i, self.anchor_period) {
                    (0, Some(p)) => p,
                    _ => rng.random_range(self.period_min..=self.period_max),
                };
                let phase = rng.random_range(0.0..2.0 * PI);
                let amplitude = rng.random_range(self.amplitude_min..=self.amplitude_max);
                Sinusoid { period, phase, amplitude }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpParams {
    /// Number of base kernels combined.
    pub max_kernels: usize,
    pub period_choices: Vec<f64>,
    pub length_scale_min: f64,
    pub length_scale_max: f64,
    pub noise_std: f64,
}

impl Default for GpParams {
    fn default() -> Self {
        Self {
            max_kernels: 3,
            period_choices: vec![12.0, 24.0, 48.0, 168.0],
            length_scale_min: 5.0,
            length_scale_max: 100.0,
            noise_std: 0.05,
        }
    }
}

/// Stationary kernels used by the GP generator.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    Rbf { length_scale: f64 },
    Periodic { period: f64, length_scale: f64 },
    Sum(Box<Kernel>, Box<Kernel>),
    Product(Box<Kernel>, Box<Kernel>),
}

impl Kernel {
    pub fn eval(&self, dt: f64) -> f64 {
        match self {
            Kernel::Rbf { length_scale } => (-0.5 * (dt / length_scale).powi(2)).exp(),
            Kernel::Periodic { period, length_scale } => {
                let s = (PI * dt.abs() / period).sin();
                (-2.0 * s * s / (length_scale * length_scale)).exp()
            }
            Kernel::Sum(a, b) => a.eval(dt) + b.eval(dt),
            Kernel::Product(a, b) => a.eval(dt) * b.eval(dt),
        }
    }

    fn random(params: &GpParams, rng: &mut ChaCha8Rng) -> Kernel {
        let base = |rng: &mut ChaCha8Rng| -> Kernel {
            if rng.random_bool(0.5) && !params.period_choices.is_empty() {
                let period = params.period_choices[rng.random_range(0..params.period_choices.len())];
                Kernel::Periodic { period, length_scale: rng.random_range(0.5..2.0) }
            } else {
                Kernel::Rbf { length_scale: rng.random_range(params.length_scale_min..=params.length_scale_max) }
            }
        };
        let mut k = base(rng);
        let extra = rng.random_range(0..params.max_kernels.max(1));
        for _ in 0..extra {
            let next = base(rng);
            k = if rng.random_bool(0.5) {
                Kernel::Sum(Box::new(k), Box::new(next))
            } else {
                Kernel::Product(Box::new(k), Box::new(next))
            };
        }
        k
    }
}

/// Largest series the dense GP sampler accepts.
pub const GP_MAX_LENGTH: usize = 4096;

/// One draw from a zero-mean GP with `kernel` at integer steps `0..len`.
pub fn gp_sample(kernel: &Kernel, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if len > GP_MAX_LENGTH {
        return Err(Error::Validation(format!("GP length {len} exceeds {GP_MAX_LENGTH}")));
    }
    let lower = gp_cholesky(kernel, len)?;
    let z: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    Ok((0..len).map(|i| (0..=i).map(|j| lower[(i, j)] * z[j]).sum()).collect())
}

fn gp_cholesky(kernel: &Kernel, len: usize) -> Result<DMatrix<f64>> {
    let mut cov = DMatrix::from_fn(len, len, |i, j| kernel.eval(i as f64 - j as f64));
    let mut jitter = 1e-8;
    loop {
        if let Some(ch) = cov.clone().cholesky() {
            return Ok(ch.l());
        }
        if jitter > 1e-2 {
            return Err(Error::Validation("GP covariance is not positive definite".into()));
        }
        for i in 0..len {
            cov[(i, i)] += jitter;
        }
        jitter *= 10.0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrendParams {
    pub max_breakpoints: usize,
    pub slope_std: f64,
    pub noise_std: f64,
    pub level: f64,
}

impl Default for TrendParams {
    fn default() -> Self {
        Self { max_breakpoints: 3, slope_std: 0.05, noise_std: 0.2, level: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Synthetic {
    Sinmix(SinmixParams),
    GpKernel(GpParams),
    TrendNoise(TrendParams),
}

/// Deterministic synthetic univariate series.
pub fn generate_synthetic(kind: &Synthetic, seed: u64, length: usize) -> Result<TimeSeries> {
    if length == 0 {
        return Err(Error::Validation("length must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = match kind {
        Synthetic::Sinmix(p) => {
            let comps = p.components(&mut rng);
            let mut walk = 0.0;
            (0..length)
                .map(|t| {
                    let tf = t as f64;
                    let signal: f64 = comps
                        .iter()
                        .map(|c| c.amplitude * (2.0 * PI * tf / c.period + c.phase).sin())
                        .sum();
                    let noise: f64 = if p.noise_std > 0.0 {
                        p.noise_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    } else {
                        0.0
                    };
                    if p.walk_std > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        walk += p.walk_std * z;
                    }
                    p.level + signal + noise + walk
                })
                .collect::<Vec<f64>>()
        }
        Synthetic::GpKernel(p) => {
            let kernel = Kernel::random(p, &mut rng);
            let mut v = gp_sample(&kernel, length, &mut rng)?;
            for x in &mut v {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += p.noise_std * z;
            }
            v
        }
        Synthetic::TrendNoise(p) => {
            let breaks = rng.random_range(0..=p.max_breakpoints);
            let mut points: Vec<usize> = (0..breaks).map(|_| rng.random_range(0..length)).collect();
            points.sort_unstable();
            let mut slope: f64 = p.slope_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            let mut level = p.level;
            let mut next = 0;
            (0..length)
                .map(|t| {
                    while next < points.len() && points[next] == t {
                        slope = p.slope_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                        next += 1;
                    }
                    level += slope;
                    let z: f64 = StandardNormal.sample(&mut rng);
                    level + p.noise_std * z
                })
                .collect()
        }
    };
    TimeSeries::univariate(format!("synthetic-{seed}"), values, 1.0)
}

/// Lag of the highest autocorrelation peak in `2..=max_lag`. Only a helper;
/// the pipeline always takes seasonality from the manifest.
pub fn estimate_seasonality(x: &[f64], max_lag: usize) -> Option<usize> {
    let n = x.len();
    if n < 4 {
        return None;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    if var == 0.0 {
        return None;
    }
    let acf: BTreeMap<usize, f64> = (1..=max_lag.min(n - 2))
        .map(|lag| {
            let c: f64 = (lag..n).map(|t| (x[t] - mean) * (x[t - lag] - mean)).sum();
            (lag, c / var)
        })
        .collect();
    acf.iter()
        .filter(|(&lag, &v)| {
            lag >= 2 && acf.get(&(lag - 1)).is_some_and(|&p| v > p) && acf.get(&(lag + 1)).is_none_or(|&nx| v >= nx)
        })
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(&lag, _)| lag)
}
