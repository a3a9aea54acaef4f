//! Exogenous household and market time series.
//!
//! An [`EnvTrace`] is the immutable input to every episode: household load,
//! rooftop PV and import/export prices on a uniform grid (5 minutes by
//! default). Policies see the future through [`PriceForecast`], a rolling
//! window of upcoming buy prices cut from the same trace.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_STEP_MINUTES: u32 = 5;
/// 24 h at 5-minute resolution.
pub const DEFAULT_HORIZON_STEPS: usize = 288;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
const CANONICAL_HEADER: [&str; 5] = ["timestamp", "load_kw", "pv_kw", "buy_price", "sell_price"];

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("schema error: column `{0}` not found in header")]
    MissingColumn(String),
    #[error("row {row}: cannot parse {field} value `{value}`")]
    Parse {
        row: usize,
        field: &'static str,
        value: String,
    },
    #[error("row {row}: expected {expected_minutes}-minute spacing, found {found_minutes} minutes")]
    Spacing {
        row: usize,
        expected_minutes: i64,
        found_minutes: i64,
    },
    #[error("row {row}: timestamp {timestamp} is not aligned to the {step_minutes}-minute grid")]
    Misaligned {
        row: usize,
        timestamp: NaiveDateTime,
        step_minutes: u32,
    },
    #[error("row {row}: {field} must be non-negative, got {value}")]
    Negative {
        row: usize,
        field: &'static str,
        value: f64,
    },
    #[error("row {row}: {field} is not finite")]
    NonFinite { row: usize, field: &'static str },
    #[error("trace needs at least 2 points, got {0}")]
    TooShort(usize),
    #[error("step length must be positive")]
    ZeroStep,
    #[error("step index {index} out of range for trace of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("cannot summarise an empty series")]
    EmptyInput,
}

pub type Result<T, E = MarketDataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub timestamp: NaiveDateTime,
    pub load_kw: f64,
    pub pv_kw: f64,
    pub buy_price: f64,
    pub sell_price: f64,
}

/// Validated, uniformly spaced exogenous series. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvTrace {
    points: Vec<TracePoint>,
    step_minutes: u32,
}

impl EnvTrace {
    /// Validates spacing, alignment, sign and finiteness. Row numbers in
    /// errors are 1-based data rows (the header is not counted).
    pub fn new(points: Vec<TracePoint>, step_minutes: u32) -> Result<Self> {
        if step_minutes == 0 {
            return Err(MarketDataError::ZeroStep);
        }
        if points.len() < 2 {
            return Err(MarketDataError::TooShort(points.len()));
        }
        let step = i64::from(step_minutes);
        for (i, p) in points.iter().enumerate() {
            let row = i + 1;
            for (field, v) in [
                ("load_kw", p.load_kw),
                ("pv_kw", p.pv_kw),
                ("buy_price", p.buy_price),
                ("sell_price", p.sell_price),
            ] {
                if !v.is_finite() {
                    return Err(MarketDataError::NonFinite { row, field });
                }
            }
            if p.load_kw < 0.0 {
                return Err(MarketDataError::Negative { row, field: "load_kw", value: p.load_kw });
            }
            if p.pv_kw < 0.0 {
                return Err(MarketDataError::Negative { row, field: "pv_kw", value: p.pv_kw });
            }
            let minute_of_day = i64::from(p.timestamp.hour() * 60 + p.timestamp.minute());
            if p.timestamp.second() != 0 || p.timestamp.nanosecond() != 0 || minute_of_day % step != 0 {
                return Err(MarketDataError::Misaligned { row, timestamp: p.timestamp, step_minutes });
            }
            if i > 0 {
                let gap = (p.timestamp - points[i - 1].timestamp).num_minutes();
                if gap != step {
                    return Err(MarketDataError::Spacing { row, expected_minutes: step, found_minutes: gap });
                }
            }
        }
        Ok(Self { points, step_minutes })
    }

    pub fn points(&self) -> &[TracePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn step_minutes(&self) -> u32 {
        self.step_minutes
    }

    pub fn step_hours(&self) -> f64 {
        f64::from(self.step_minutes) / 60.0
    }

    pub fn get(&self, index: usize) -> Result<&TracePoint> {
        self.points.get(index).ok_or(MarketDataError::IndexOutOfRange { index, len: self.len() })
    }

    /// SHA-256 over the canonical CSV rendering of `points[start..start + len]`.
    /// Two reports can only be compared when their window digests agree.
    pub fn window_digest(&self, start: usize, len: usize) -> String {
        let end = (start + len).min(self.points.len());
        let mut hasher = Sha256::new();
        hasher.update(self.step_minutes.to_le_bytes());
        for p in &self.points[start.min(end)..end] {
            hasher.update(canonical_row(p).as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Which physical unit the power columns of an input file use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerUnit {
    #[default]
    Kilowatts,
    Watts,
}

impl PowerUnit {
    fn to_kw(self, v: f64) -> f64 {
        match self {
            PowerUnit::Kilowatts => v,
            PowerUnit::Watts => v / 1000.0,
        }
    }
}

/// Maps input file headers onto trace fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    pub timestamp: String,
    pub load: String,
    pub pv: String,
    pub buy_price: String,
    /// When absent (or missing from the header), sell price mirrors buy price.
    pub sell_price: Option<String>,
    pub power_unit: PowerUnit,
    pub step_minutes: u32,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            load: "load_kw".into(),
            pv: "pv_kw".into(),
            buy_price: "buy_price".into(),
            sell_price: Some("sell_price".into()),
            power_unit: PowerUnit::Kilowatts,
            step_minutes: DEFAULT_STEP_MINUTES,
        }
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(t) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_local());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
}

fn parse_number(row: usize, field: &'static str, raw: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| MarketDataError::Parse { row, field, value: raw.to_string() })
}

/// Reads a CSV file into a validated trace.
pub fn load_trace(path: impl AsRef<Path>, mapping: &ColumnMapping) -> Result<EnvTrace> {
    let path = path.as_ref();
    let csv_err = |source| MarketDataError::Csv { path: path.to_path_buf(), source };
    let file = File::open(path).map_err(|source| MarketDataError::Io { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| MarketDataError::MissingColumn(name.to_string()))
    };
    let ts_col = column(&mapping.timestamp)?;
    let load_col = column(&mapping.load)?;
    let pv_col = column(&mapping.pv)?;
    let buy_col = column(&mapping.buy_price)?;
    let sell_col = mapping.sell_price.as_deref().and_then(|name| headers.iter().position(|h| h == name));

    let mut points = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(csv_err)?;
        let field = |col: usize| record.get(col).unwrap_or("");
        let raw_ts = field(ts_col);
        let timestamp = parse_timestamp(raw_ts).ok_or_else(|| MarketDataError::Parse {
            row,
            field: "timestamp",
            value: raw_ts.to_string(),
        })?;
        let buy_price = parse_number(row, "buy_price", field(buy_col))?;
        let sell_price = match sell_col {
            Some(c) => parse_number(row, "sell_price", field(c))?,
            None => buy_price,
        };
        points.push(TracePoint {
            timestamp,
            load_kw: mapping.power_unit.to_kw(parse_number(row, "load_kw", field(load_col))?),
            pv_kw: mapping.power_unit.to_kw(parse_number(row, "pv_kw", field(pv_col))?),
            buy_price,
            sell_price,
        });
    }
    EnvTrace::new(points, mapping.step_minutes)
}

fn canonical_row(p: &TracePoint) -> String {
    // `{}` on f64 prints the shortest representation that parses back exactly.
    format!(
        "{},{},{},{},{}\n",
        p.timestamp.format(TIMESTAMP_FORMAT),
        p.load_kw,
        p.pv_kw,
        p.buy_price,
        p.sell_price
    )
}

/// Writes the canonical `timestamp,load_kw,pv_kw,buy_price,sell_price` CSV.
pub fn write_trace(trace: &EnvTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| MarketDataError::Io { path: path.to_path_buf(), source };
    let mut out = io::BufWriter::new(File::create(path).map_err(io_err)?);
    writeln!(out, "{}", CANONICAL_HEADER.join(",")).map_err(io_err)?;
    for p in trace.points() {
        out.write_all(canonical_row(p).as_bytes()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Upcoming buy prices as seen from one step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PriceForecast {
    pub horizon_steps: usize,
    pub values: Vec<f64>,
}

impl PriceForecast {
    pub fn max(&self, horizon: usize) -> Option<f64> {
        self.head(horizon).iter().copied().reduce(f64::max)
    }

    pub fn min(&self, horizon: usize) -> Option<f64> {
        self.head(horizon).iter().copied().reduce(f64::min)
    }

    pub fn mean(&self, horizon: usize) -> Option<f64> {
        let head = self.head(horizon);
        (!head.is_empty()).then(|| head.iter().sum::<f64>() / head.len() as f64)
    }

    fn head(&self, horizon: usize) -> &[f64] {
        &self.values[..horizon.min(self.values.len())]
    }
}

/// Perfect-foresight forecast: the next `horizon_steps` buy prices after
/// `step_index`, padded with the final trace price past the end.
pub fn forecast_at(trace: &EnvTrace, step_index: usize, horizon_steps: usize) -> Result<PriceForecast> {
    if step_index >= trace.len() {
        return Err(MarketDataError::IndexOutOfRange { index: step_index, len: trace.len() });
    }
    let points = trace.points();
    let last = points[points.len() - 1].buy_price;
    let values = (0..horizon_steps)
        .map(|k| points.get(step_index + 1 + k).map_or(last, |p| p.buy_price))
        .collect();
    Ok(PriceForecast { horizon_steps, values })
}

/// Forecast settings. Noise is zero unless configured; when present it is
/// drawn from a generator keyed on `(seed, step_index)` so a step always
/// sees the same forecast regardless of episode window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Forecaster {
    pub horizon_steps: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for Forecaster {
    fn default() -> Self {
        Self { horizon_steps: DEFAULT_HORIZON_STEPS, noise_std: 0.0, seed: 0 }
    }
}

impl Forecaster {
    pub fn at(&self, trace: &EnvTrace, step_index: usize) -> Result<PriceForecast> {
        let mut forecast = forecast_at(trace, step_index, self.horizon_steps)?;
        if self.noise_std > 0.0 && self.noise_std.is_finite() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (step_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let normal = Normal::new(0.0, self.noise_std).expect("finite positive std");
            for v in &mut forecast.values {
                *v += normal.sample(&mut rng);
            }
        }
        Ok(forecast)
    }
}

/// Exact order statistics of one price series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub p90: f64,
}

impl PriceSummary {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(MarketDataError::EmptyInput);
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            min: sorted[0],
            q1: lower_quantile(&sorted, 0.25),
            median: lower_quantile(&sorted, 0.5),
            q3: lower_quantile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
            p90: lower_quantile(&sorted, 0.9),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Element at `floor(q * (n - 1))` of an ascending slice. For q = 0.5 this
/// is the lower-middle element, so thresholds always hit an observed value.
pub fn lower_quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).floor() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub n_points: usize,
    pub buy: PriceSummary,
    pub sell: PriceSummary,
    pub pv_peak_kw: f64,
    pub load_peak_kw: f64,
}

impl TraceStats {
    pub fn from_points(points: &[TracePoint]) -> Result<Self> {
        if points.is_empty() {
            return Err(MarketDataError::EmptyInput);
        }
        let buy: Vec<f64> = points.iter().map(|p| p.buy_price).collect();
        let sell: Vec<f64> = points.iter().map(|p| p.sell_price).collect();
        Ok(Self {
            n_points: points.len(),
            buy: PriceSummary::from_values(&buy)?,
            sell: PriceSummary::from_values(&sell)?,
            pv_peak_kw: points.iter().map(|p| p.pv_kw).fold(0.0, f64::max),
            load_peak_kw: points.iter().map(|p| p.load_kw).fold(0.0, f64::max),
        })
    }
}

pub fn trace_stats(trace: &EnvTrace) -> Result<TraceStats> {
    TraceStats::from_points(trace.points())
}

/// Parameters of the sinusoidal fixture generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub days: u32,
    pub seed: u64,
    pub step_minutes: u32,
    pub start_date: NaiveDate,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            days: 7,
            seed: 0,
            step_minutes: DEFAULT_STEP_MINUTES,
            start_date: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
        }
    }
}

impl SyntheticSpec {
    /// Parses `days=N seed=S` (space- or comma-separated, any order).
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut spec = Self::default();
        for token in text.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
            let (key, value) = token.split_once('=').ok_or_else(|| format!("expected key=value, got `{token}`"))?;
            let bad = |_| format!("invalid value for {key}: `{value}`");
            match key {
                "days" => spec.days = value.parse().map_err(bad)?,
                "seed" => spec.seed = value.parse().map_err(bad)?,
                "step" | "step_minutes" => spec.step_minutes = value.parse().map_err(bad)?,
                other => return Err(format!("unknown synthetic key `{other}`")),
            }
        }
        if spec.days == 0 {
            return Err("days must be at least 1".into());
        }
        Ok(spec)
    }
}

/// Daily price, PV and load cycles with seeded Gaussian noise.
///
/// Prices peak in the evening (around 18:30) and bottom out in the early
/// morning; PV follows a half-sine between 06:00 and 18:00 with 5 kW peak;
/// load has morning and evening bumps over a 0.4 kW base.
pub fn synthetic_trace(spec: &SyntheticSpec) -> Result<EnvTrace> {
    if spec.step_minutes == 0 {
        return Err(MarketDataError::ZeroStep);
    }
    let steps_per_day = (24 * 60 / spec.step_minutes) as usize;
    let n = steps_per_day * spec.days as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let price_noise = Normal::new(0.0, 0.02).expect("valid std");
    let unit_noise = Normal::new(0.0, 0.1).expect("valid std");
    let start = spec.start_date.and_hms_opt(0, 0, 0).expect("midnight exists");
    let step = chrono::Duration::minutes(i64::from(spec.step_minutes));

    let points = (0..n)
        .map(|i| {
            let hour = (i % steps_per_day) as f64 * f64::from(spec.step_minutes) / 60.0;
            let price = 0.21 + 0.16 * (2.0 * PI * (hour - 18.5) / 24.0).cos() + price_noise.sample(&mut rng);
            let daylight = (PI * (hour - 6.0) / 12.0).sin();
            let pv = if (6.0..18.0).contains(&hour) { 5.0 * daylight * (1.0 + unit_noise.sample(&mut rng)) } else { 0.0 };
            let bump = |centre: f64, width: f64| (-((hour - centre) / width).powi(2)).exp();
            let load = (0.4 + 0.9 * bump(7.5, 1.2) + 1.6 * bump(19.0, 2.0)) * (1.0 + unit_noise.sample(&mut rng));
            let price = round_to(price.max(0.01), 4);
            TracePoint {
                timestamp: start + step * i as i32,
                load_kw: round_to(load.max(0.05), 3),
                pv_kw: round_to(pv.max(0.0), 3),
                buy_price: price,
                sell_price: price,
            }
        })
        .collect();
    EnvTrace::new(points, spec.step_minutes)
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    (v * scale).round() / scale
}
