//! Hourly series panels: ingestion, scaling, calendar features, window
//! sampling and scenario construction.

mod scenario;
mod window;

pub use scenario::{
    augmentation_mix, make_cold_start_scenario, make_far_forecast_scenario, make_stretch_scenario,
    stretch_target_fraction, EvalWindow, ScenarioDataset, ScenarioKind, ScenarioManifest,
    COLD_START_KEEP, HORIZON,
};
pub use window::{context_for, real_batch, window_features, AlignedBatch, WindowSampler};

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use serde::Deserialize;

use crate::error::{Error, Result};

/// HourOfDay, DayOfWeek, DayOfMonth, DayOfYear, Age.
pub const TIME_FEATURES: usize = 5;

const TIMESTAMP_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M",
];

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim().trim_end_matches('Z');
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%d %H:%M:%S").to_string()
}

/// Calendar and age features of the hourly stamp `start + t` hours.
pub fn time_feature_column(start: NaiveDateTime, t: usize) -> [f32; TIME_FEATURES] {
    let ts = start + Duration::hours(t as i64);
    [
        ts.hour() as f32 / 23.0 - 0.5,
        ts.weekday().num_days_from_monday() as f32 / 6.0 - 0.5,
        ts.day0() as f32 / 30.0 - 0.5,
        ts.ordinal0() as f32 / 365.0 - 0.5,
        (2.0 + t as f64).ln() as f32,
    ]
}

/// Feature matrix `[TIME_FEATURES × len]` (row-major) for stamps
/// `offset..offset + len`; age counts from the panel start.
pub fn time_features(start: NaiveDateTime, offset: usize, len: usize) -> Vec<f32> {
    let mut out = vec![0.0; TIME_FEATURES * len];
    for j in 0..len {
        let col = time_feature_column(start, offset + j);
        for (d, v) in col.iter().enumerate() {
            out[d * len + j] = *v;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    JsonLines,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" | "jsonlines" | "json-lines" => Ok(Format::JsonLines),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

/// Equal-length hourly series sharing one start stamp. Positions
/// `0..train_len` form the training range.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesPanel {
    pub ids: Vec<String>,
    pub start: NaiveDateTime,
    pub values: Vec<Vec<f64>>,
    pub train_len: usize,
}

impl SeriesPanel {
    pub fn new(ids: Vec<String>, start: NaiveDateTime, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Ingest("panel has no series".into()));
        }
        if ids.len() != values.len() {
            return Err(Error::Ingest(format!(
                "{} ids for {} series",
                ids.len(),
                values.len()
            )));
        }
        let t = values[0].len();
        if t == 0 {
            return Err(Error::Ingest("series are empty".into()));
        }
        for (id, v) in ids.iter().zip(&values) {
            if v.len() != t {
                return Err(Error::Ingest(format!(
                    "series `{id}` has {} points, expected {t}",
                    v.len()
                )));
            }
            if let Some(p) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::Ingest(format!(
                    "series `{id}` has a non-finite value at position {p}"
                )));
            }
        }
        Ok(SeriesPanel {
            ids,
            start,
            values,
            train_len: t,
        })
    }

    pub fn n_series(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + Duration::hours(t as i64)
    }

    pub fn with_train_len(mut self, train_len: usize) -> Result<Self> {
        if train_len == 0 || train_len > self.len() {
            return Err(Error::Config(format!(
                "training range of {train_len} points does not fit a panel of {}",
                self.len()
            )));
        }
        self.train_len = train_len;
        Ok(self)
    }

    /// Training range ends just before `split`.
    pub fn with_split(self, split: NaiveDateTime) -> Result<Self> {
        let hours = (split - self.start).num_hours();
        if hours <= 0 || split != self.timestamp(hours as usize) {
            return Err(Error::Config(format!(
                "split {} is not an hourly stamp after the panel start",
                format_timestamp(split)
            )));
        }
        self.with_train_len(hours as usize)
    }

    pub fn features(&self, offset: usize, len: usize) -> Vec<f32> {
        time_features(self.start, offset, len)
    }
}

struct Builder {
    order: Vec<String>,
    points: HashMap<String, Vec<(NaiveDateTime, f64, usize)>>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            order: Vec::new(),
            points: HashMap::new(),
        }
    }

    fn push(&mut self, id: &str, ts: NaiveDateTime, v: f64, line: usize) {
        if !self.points.contains_key(id) {
            self.order.push(id.to_string());
        }
        self.points
            .entry(id.to_string())
            .or_default()
            .push((ts, v, line));
    }

    fn finish(mut self) -> Result<SeriesPanel> {
        let mut start = None;
        let mut values = Vec::with_capacity(self.order.len());
        for id in &self.order {
            let mut pts = self.points.remove(id).unwrap_or_default();
            pts.sort_by_key(|p| p.0);
            let first = pts[0].0;
            match start {
                None => start = Some(first),
                Some(s) if s != first => {
                    return Err(Error::Ingest(format!(
                        "series `{id}` starts at {}, panel starts at {}",
                        format_timestamp(first),
                        format_timestamp(s)
                    )))
                }
                _ => {}
            }
            let mut v = Vec::with_capacity(pts.len());
            for (k, (ts, x, line)) in pts.iter().enumerate() {
                let expected = first + Duration::hours(k as i64);
                if *ts < expected {
                    return Err(Error::Ingest(format!(
                        "duplicate timestamp {} in series `{id}` (line {line})",
                        format_timestamp(*ts)
                    )));
                }
                if *ts > expected {
                    return Err(Error::Ingest(format!(
                        "series `{id}` is missing timestamp {}",
                        format_timestamp(expected)
                    )));
                }
                v.push(*x);
            }
            values.push(v);
        }
        let start = start.ok_or_else(|| Error::Ingest("no data rows".into()))?;
        SeriesPanel::new(self.order, start, values)
    }
}

/// Long format with header `series_id,timestamp,value`.
pub fn load_csv(reader: impl std::io::Read) -> Result<SeriesPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut b = Builder::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        let ts = parse_timestamp(&rec[1]).ok_or_else(|| Error::Parse {
            line,
            msg: format!("malformed timestamp `{}`", &rec[1]),
        })?;
        let v: f64 = rec[2].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("non-numeric value `{}`", &rec[2]),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                line,
                msg: format!("non-finite value `{}`", &rec[2]),
            });
        }
        b.push(&rec[0], ts, v, line);
    }
    b.finish()
}

#[derive(Deserialize)]
struct JsonSeries {
    start: String,
    target: Vec<serde_json::Value>,
    #[serde(default)]
    item_id: Option<serde_json::Value>,
}

/// One `{"start": …, "target": […]}` object per line.
pub fn load_json_lines(reader: impl BufRead) -> Result<SeriesPanel> {
    let mut b = Builder::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: JsonSeries = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let start = parse_timestamp(&s.start).ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("malformed start `{}`", s.start),
        })?;
        let id = match s.item_id {
            Some(serde_json::Value::String(x)) => x,
            Some(other) => other.to_string(),
            None => (b.order.len()).to_string(),
        };
        for (k, v) in s.target.iter().enumerate() {
            let x = v
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("non-numeric target entry {k}: {v}"),
                })?;
            b.push(&id, start + Duration::hours(k as i64), x, line_no);
        }
    }
    b.finish()
}

pub fn load_panel(path: &Path, format: Format) -> Result<SeriesPanel> {
    let file = std::fs::File::open(path)?;
    match format {
        Format::Csv => load_csv(std::io::BufReader::new(file)),
        Format::JsonLines => load_json_lines(std::io::BufReader::new(file)),
    }
}

pub fn write_csv(panel: &SeriesPanel, w: impl std::io::Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["series_id", "timestamp", "value"])
        .map_err(|e| Error::Ingest(e.to_string()))?;
    for (id, v) in panel.ids.iter().zip(&panel.values) {
        for (t, x) in v.iter().enumerate() {
            wr.write_record([
                id.clone(),
                format_timestamp(panel.timestamp(t)),
                x.to_string(),
            ])
            .map_err(|e| Error::Ingest(e.to_string()))?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn write_json_lines(panel: &SeriesPanel, mut w: impl std::io::Write) -> Result<()> {
    for (id, v) in panel.ids.iter().zip(&panel.values) {
        let obj = serde_json::json!({
            "item_id": id,
            "start": format_timestamp(panel.start),
            "target": v,
        });
        writeln!(w, "{obj}")?;
    }
    Ok(())
}

/// Affine map of the training range onto [0, 1], one (min, max) per
/// dataset or, in per-series mode, per series.
#[derive(Clone, Debug, PartialEq)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(panel: &SeriesPanel, per_series: bool) -> Result<Self> {
        let ranges: Vec<(f64, f64)> = panel
            .values
            .iter()
            .map(|v| {
                v[..panel.train_len]
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                        (lo.min(x), hi.max(x))
                    })
            })
            .collect();
        let (min, max): (Vec<f64>, Vec<f64>) = if per_series {
            ranges.into_iter().unzip()
        } else {
            let lo = ranges.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
            let hi = ranges.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
            (vec![lo], vec![hi])
        };
        for (i, (lo, hi)) in min.iter().zip(&max).enumerate() {
            if lo == hi {
                let what = if per_series {
                    format!("series `{}`", panel.ids[i])
                } else {
                    "dataset".into()
                };
                return Err(Error::Degenerate(format!(
                    "{what} is constant ({lo}) over the training range"
                )));
            }
        }
        Ok(MinMaxScaler { min, max })
    }

    pub fn per_series(&self) -> bool {
        self.min.len() > 1
    }

    fn range(&self, series: usize) -> (f64, f64) {
        let i = if self.per_series() { series } else { 0 };
        (self.min[i], self.max[i])
    }

    pub fn scale_value(&self, series: usize, x: f64) -> f64 {
        let (lo, hi) = self.range(series);
        (x - lo) / (hi - lo)
    }

    pub fn inverse_value(&self, series: usize, x: f64) -> f64 {
        let (lo, hi) = self.range(series);
        x * (hi - lo) + lo
    }

    pub fn transform(&self, panel: &SeriesPanel) -> Result<SeriesPanel> {
        self.check(panel)?;
        let mut out = panel.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            v.iter_mut().for_each(|x| *x = self.scale_value(i, *x));
        }
        Ok(out)
    }

    pub fn inverse(&self, panel: &SeriesPanel) -> Result<SeriesPanel> {
        self.check(panel)?;
        let mut out = panel.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            v.iter_mut().for_each(|x| *x = self.inverse_value(i, *x));
        }
        Ok(out)
    }

    fn check(&self, panel: &SeriesPanel) -> Result<()> {
        if self.per_series() && self.min.len() != panel.n_series() {
            return Err(Error::Contract(format!(
                "scaler fitted on {} series, panel has {}",
                self.min.len(),
                panel.n_series()
            )));
        }
        Ok(())
    }

    /// `scale_min` / `scale_max` entries for checkpoint config echoes.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        vec![
            ("scale_min".into(), join(&self.min)),
            ("scale_max".into(), join(&self.max)),
        ]
    }

    pub fn from_pairs(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let parse = |k: &str| -> Result<Vec<f64>> {
            get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")))?
                .split(',')
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Checkpoint(format!("malformed `{k}`")))
                })
                .collect()
        };
        let (min, max) = (parse("scale_min")?, parse("scale_max")?);
        if min.len() != max.len() {
            return Err(Error::Checkpoint(
                "scale_min and scale_max differ in length".into(),
            ));
        }
        Ok(MinMaxScaler { min, max })
    }
}

/// Minmax-scales the panel using its training range.
pub fn minmax_scale(panel: &SeriesPanel, per_series: bool) -> Result<(SeriesPanel, MinMaxScaler)> {
    let scaler = MinMaxScaler::fit(panel, per_series)?;
    Ok((scaler.transform(panel)?, scaler))
}

/// Parameters of [`synthetic_panel`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_series: usize,
    pub len: usize,
    pub noise: f64,
    /// Level change per point.
    pub trend: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_series: 20,
            len: 2000,
            noise: 0.1,
            trend: 0.0,
            seed: 0,
        }
    }
}

/// Hourly panel of daily plus weekly sinusoids with per-series level,
/// amplitude and phase, and Gaussian noise. Starts on a Monday at midnight.
pub fn synthetic_panel(spec: &SyntheticSpec) -> Result<SeriesPanel> {
    use std::f64::consts::TAU;
    let mut rng = psagan_tensor::SeededRng::new(spec.seed).fork("synthetic");
    let start = NaiveDate::from_ymd_opt(2021, 1, 4)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let values = (0..spec.n_series)
        .map(|_| {
            let level = 1.0 + 2.0 * rng.uniform_f64();
            let amp = 0.5 + rng.uniform_f64();
            let phase = TAU * rng.uniform_f64();
            let weekly = TAU * rng.uniform_f64();
            (0..spec.len)
                .map(|t| {
                    let t = t as f64;
                    level
                        + spec.trend * t
                        + amp * (TAU * t / 24.0 + phase).sin()
                        + 0.3 * amp * (TAU * t / 168.0 + weekly).sin()
                        + spec.noise * amp * rng.normal() as f64
                })
                .collect()
        })
        .collect();
    let ids = (0..spec.n_series).map(|i| format!("s{i}")).collect();
    SeriesPanel::new(ids, start, values)
}
