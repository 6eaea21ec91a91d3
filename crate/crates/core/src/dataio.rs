//! Sensor time series: ingestion, chronological splitting, channel
//! normalization, cyclic time features, windowing into dual-channel batches
//! and hold-out designation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, NaiveDateTime, Timelike};
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::csv_error;

pub const SPEED: usize = 0;
pub const FLOW: usize = 1;
pub const TIME_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SensorSeries {
    pub node_ids: Vec<String>,
    pub start: NaiveDateTime,
    pub interval_minutes: u32,
    /// N×T km/h
    pub speed: Array2<f64>,
    /// N×T vehicles per interval
    pub flow: Array2<f64>,
    pub speed_missing: Array2<bool>,
    pub flow_missing: Array2<bool>,
}

impl SensorSeries {
    pub fn n(&self) -> usize {
        self.speed.nrows()
    }

    pub fn t(&self) -> usize {
        self.speed.ncols()
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + Duration::minutes(self.interval_minutes as i64 * t as i64)
    }

    pub fn timestamps(&self) -> Vec<NaiveDateTime> {
        (0..self.t()).map(|t| self.timestamp(t)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t) = self.speed.dim();
        if self.node_ids.len() != n
            || self.flow.dim() != (n, t)
            || self.speed_missing.dim() != (n, t)
            || self.flow_missing.dim() != (n, t)
        {
            return Err(Error::Shape("series channels disagree in shape".into()));
        }
        if self.interval_minutes == 0 {
            return Err(Error::Input("interval must be positive".into()));
        }
        for ((i, j), &v) in self.speed.indexed_iter() {
            if !self.speed_missing[[i, j]] && !(v.is_finite() && v >= 0.0) {
                return Err(Error::Input(format!(
                    "node {} t={j}: speed {v} must be finite and >= 0",
                    self.node_ids[i]
                )));
            }
        }
        for ((i, j), &v) in self.flow.indexed_iter() {
            if !self.flow_missing[[i, j]] && !(v.is_finite() && v >= 0.0) {
                return Err(Error::Input(format!(
                    "node {} t={j}: flow {v} must be finite and >= 0",
                    self.node_ids[i]
                )));
            }
        }
        Ok(())
    }

    /// Contiguous time slice `[from, to)`.
    pub fn slice_time(&self, from: usize, to: usize) -> SensorSeries {
        SensorSeries {
            node_ids: self.node_ids.clone(),
            start: self.timestamp(from),
            interval_minutes: self.interval_minutes,
            speed: self.speed.slice(s![.., from..to]).to_owned(),
            flow: self.flow.slice(s![.., from..to]).to_owned(),
            speed_missing: self.speed_missing.slice(s![.., from..to]).to_owned(),
            flow_missing: self.flow_missing.slice(s![.., from..to]).to_owned(),
        }
    }

    /// Reorders nodes: row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> SensorSeries {
        SensorSeries {
            node_ids: perm.iter().map(|&i| self.node_ids[i].clone()).collect(),
            start: self.start,
            interval_minutes: self.interval_minutes,
            speed: self.speed.select(Axis(0), perm),
            flow: self.flow.select(Axis(0), perm),
            speed_missing: self.speed_missing.select(Axis(0), perm),
            flow_missing: self.flow_missing.select(Axis(0), perm),
        }
    }
}

/// Segment lengths for `fractions` of `t` steps, `floor(cumulative · t)` boundaries.
pub fn split_lengths(t: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return Err(Error::Param(format!("split fractions must be positive: {fractions:?}")));
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Param(format!(
            "split fractions must sum to 1, got {}",
            a + b + c
        )));
    }
    // the epsilon absorbs representation error such as 0.6 + 0.2 = 0.8000000000000002
    let b1 = (a * t as f64 + 1e-9).floor() as usize;
    let b2 = ((a + b) * t as f64 + 1e-9).floor() as usize;
    let b2 = b2.min(t);
    if b1 == 0 || b2 <= b1 || b2 >= t {
        return Err(Error::Input(format!(
            "T={t} too small for non-empty segments with fractions {fractions:?}"
        )));
    }
    Ok((b1, b2 - b1, t - b2))
}

pub fn chronological_split(
    series: &SensorSeries,
    fractions: (f64, f64, f64),
) -> Result<(SensorSeries, SensorSeries, SensorSeries)> {
    let t = series.t();
    let (tr, va, _) = split_lengths(t, fractions)?;
    Ok((
        series.slice_time(0, tr),
        series.slice_time(tr, tr + va),
        series.slice_time(tr + va, t),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Speed,
    Flow,
}

impl Channel {
    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            SPEED => Ok(Channel::Speed),
            FLOW => Ok(Channel::Flow),
            _ => Err(Error::Param(format!("unknown channel index {i}"))),
        }
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speed" => Ok(Channel::Speed),
            "flow" => Ok(Channel::Flow),
            _ => Err(Error::Param(format!("unknown channel {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-channel z-score normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub speed: ChannelStats,
    pub flow: ChannelStats,
    pub fit_source: String,
}

fn channel_stats(values: impl Iterator<Item = f64>, what: &str) -> Result<ChannelStats> {
    let (mut count, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);
    for v in values {
        count += 1;
        let delta = v - mean;
        mean += delta / count as f64;
        m2 += delta * (v - mean);
    }
    if count == 0 {
        return Err(Error::DegenerateChannel(format!("{what}: no observed values")));
    }
    let std = (m2 / count as f64).sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::DegenerateChannel(format!("{what}: zero variance")));
    }
    Ok(ChannelStats { mean, std })
}

/// Speed statistics from every node; flow statistics exclude hold-out nodes.
pub fn fit_normalizer(train: &SensorSeries, holdout: &HoldoutSet) -> Result<Normalizer> {
    if train.t() == 0 {
        return Err(Error::Input("training segment is empty".into()));
    }
    let speed = channel_stats(
        train
            .speed
            .iter()
            .zip(train.speed_missing.iter())
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| v),
        "speed",
    )?;
    let is_holdout = holdout.indicator();
    let flow = channel_stats(
        train
            .flow
            .indexed_iter()
            .filter(|((i, j), _)| !is_holdout[*i] && !train.flow_missing[[*i, *j]])
            .map(|(_, &v)| v),
        "flow",
    )?;
    Ok(Normalizer {
        speed,
        flow,
        fit_source: format!(
            "train segment T={} from {}; flow excludes {} hold-out nodes",
            train.t(),
            train.start,
            holdout.len()
        ),
    })
}

impl Normalizer {
    pub fn stats(&self, channel: Channel) -> ChannelStats {
        match channel {
            Channel::Speed => self.speed,
            Channel::Flow => self.flow,
        }
    }

    pub fn normalize(&self, x: f64, channel: Channel) -> f64 {
        let s = self.stats(channel);
        (x - s.mean) / s.std
    }

    pub fn denormalize(&self, x: f64, channel: Channel) -> f64 {
        let s = self.stats(channel);
        x * s.std + s.mean
    }

    pub fn normalize_named(&self, x: f64, channel: &str) -> Result<f64> {
        Ok(self.normalize(x, channel.parse()?))
    }

    pub fn denormalize_named(&self, x: f64, channel: &str) -> Result<f64> {
        Ok(self.denormalize(x, channel.parse()?))
    }
}

/// Rows of `[sin(2πh/24), cos(2πh/24), sin(2πd/7), cos(2πd/7)]`, `h` the
/// fractional hour and `d` the day of week with Monday = 0.
pub fn make_time_features(timestamps: &[NaiveDateTime]) -> Array2<f64> {
    use std::f64::consts::TAU;
    let mut out = Array2::zeros((timestamps.len(), TIME_FEATURES));
    for (r, ts) in timestamps.iter().enumerate() {
        let h = ts.hour() as f64 + ts.minute() as f64 / 60.0 + ts.second() as f64 / 3600.0;
        let d = ts.weekday().num_days_from_monday() as f64;
        out[[r, 0]] = (TAU * h / 24.0).sin();
        out[[r, 1]] = (TAU * h / 24.0).cos();
        out[[r, 2]] = (TAU * d / 7.0).sin();
        out[[r, 3]] = (TAU * d / 7.0).cos();
    }
    out
}

/// A batch of windows. Flow channel and targets are normalized; missing
/// entries hold 0 (the channel mean) and are flagged in `observed`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// B×N×T_w×2, channel 0 speed, channel 1 flow
    pub x: Array4<f64>,
    /// B×N×T_w clean normalized flow
    pub y: Array3<f64>,
    /// B×N×T_w, true where the flow target is observed
    pub observed: Array3<bool>,
    /// B×T_w×4
    pub time: Array3<f64>,
    pub window_starts: Vec<usize>,
}

impl WindowBatch {
    pub fn batch_size(&self) -> usize {
        self.x.dim().0
    }

    pub fn n(&self) -> usize {
        self.x.dim().1
    }

    pub fn t(&self) -> usize {
        self.x.dim().2
    }

    /// Stacks batches with equal node count and window length along the batch axis.
    pub fn concat(parts: &[&WindowBatch]) -> Result<WindowBatch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("cannot concatenate zero batches".into()))?;
        if parts.iter().any(|p| p.n() != first.n() || p.t() != first.t()) {
            return Err(Error::Shape("batches differ in node count or window length".into()));
        }
        let shape = |e: ndarray::ShapeError| Error::Shape(e.to_string());
        let xs: Vec<_> = parts.iter().map(|p| p.x.view()).collect();
        let ys: Vec<_> = parts.iter().map(|p| p.y.view()).collect();
        let os: Vec<_> = parts.iter().map(|p| p.observed.view()).collect();
        let ts: Vec<_> = parts.iter().map(|p| p.time.view()).collect();
        Ok(WindowBatch {
            x: ndarray::concatenate(Axis(0), &xs).map_err(shape)?,
            y: ndarray::concatenate(Axis(0), &ys).map_err(shape)?,
            observed: ndarray::concatenate(Axis(0), &os).map_err(shape)?,
            time: ndarray::concatenate(Axis(0), &ts).map_err(shape)?,
            window_starts: parts.iter().flat_map(|p| p.window_starts.iter().copied()).collect(),
        })
    }
}

/// Window starts covering every time step: stride `window_length`, plus a
/// final window aligned to the end when the length is not a multiple.
pub fn covering_starts(t: usize, window_length: usize) -> Result<Vec<usize>> {
    let mut starts = window_starts(t, window_length, window_length)?;
    let last = t - window_length;
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    Ok(starts)
}

/// Start indices of full windows; the trailing partial window is dropped.
pub fn window_starts(t: usize, window_length: usize, stride: usize) -> Result<Vec<usize>> {
    if window_length == 0 || stride == 0 {
        return Err(Error::Param("window length and stride must be >= 1".into()));
    }
    if window_length > t {
        return Err(Error::Input(format!(
            "window length {window_length} exceeds series length {t}"
        )));
    }
    Ok((0..=t - window_length).step_by(stride).collect())
}

pub fn window(
    series: &SensorSeries,
    normalizer: &Normalizer,
    window_length: usize,
    stride: usize,
    batch_size: usize,
) -> Result<Vec<WindowBatch>> {
    let starts = window_starts(series.t(), window_length, stride)?;
    window_at(series, normalizer, window_length, &starts, batch_size)
}

/// Windows starting at the given indices, in the given order.
pub fn window_at(
    series: &SensorSeries,
    normalizer: &Normalizer,
    window_length: usize,
    starts: &[usize],
    batch_size: usize,
) -> Result<Vec<WindowBatch>> {
    if batch_size == 0 {
        return Err(Error::Param("batch size must be >= 1".into()));
    }
    if window_length == 0 {
        return Err(Error::Param("window length must be >= 1".into()));
    }
    if let Some(&bad) = starts.iter().find(|&&s| s + window_length > series.t()) {
        return Err(Error::Input(format!(
            "window starting at {bad} runs past the series end {}",
            series.t()
        )));
    }
    let n = series.n();
    let speed = Array2::from_shape_fn(series.speed.dim(), |(i, j)| {
        if series.speed_missing[[i, j]] {
            0.0
        } else {
            normalizer.normalize(series.speed[[i, j]], Channel::Speed)
        }
    });
    let flow = Array2::from_shape_fn(series.flow.dim(), |(i, j)| {
        if series.flow_missing[[i, j]] {
            0.0
        } else {
            normalizer.normalize(series.flow[[i, j]], Channel::Flow)
        }
    });
    let time = make_time_features(&series.timestamps());

    Ok(starts
        .chunks(batch_size)
        .map(|chunk| {
            let b = chunk.len();
            let mut x = Array4::zeros((b, n, window_length, 2));
            let mut y = Array3::zeros((b, n, window_length));
            let mut observed = Array3::from_elem((b, n, window_length), false);
            let mut tf = Array3::zeros((b, window_length, TIME_FEATURES));
            for (bi, &st) in chunk.iter().enumerate() {
                let range = st..st + window_length;
                let sp = speed.slice(s![.., range.clone()]);
                let fl = flow.slice(s![.., range.clone()]);
                x.slice_mut(s![bi, .., .., SPEED]).assign(&sp);
                x.slice_mut(s![bi, .., .., FLOW]).assign(&fl);
                y.slice_mut(s![bi, .., ..]).assign(&fl);
                observed
                    .slice_mut(s![bi, .., ..])
                    .assign(&series.flow_missing.slice(s![.., range.clone()]).mapv(|m| !m));
                tf.slice_mut(s![bi, .., ..]).assign(&time.slice(s![range, ..]));
            }
            WindowBatch {
                x,
                y,
                observed,
                time: tf,
                window_starts: chunk.to_vec(),
            }
        })
        .collect())
}

/// Sensors whose flow is never shown to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldoutSet {
    pub n_nodes: usize,
    /// Sorted node indices.
    pub indices: Vec<usize>,
}

impl HoldoutSet {
    pub fn new(n_nodes: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.iter().any(|&i| i >= n_nodes) {
            return Err(Error::Input("hold-out index out of range".into()));
        }
        Ok(Self { n_nodes, indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, node: usize) -> bool {
        self.indices.binary_search(&node).is_ok()
    }

    pub fn indicator(&self) -> Vec<bool> {
        let mut v = vec![false; self.n_nodes];
        for &i in &self.indices {
            v[i] = true;
        }
        v
    }

    /// Complement of the hold-out set, in ascending order.
    pub fn training_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes).filter(|&i| !self.contains(i)).collect()
    }
}

/// Draws `floor(ratio · n)` distinct nodes uniformly from a seeded generator.
pub fn select_holdout(n_nodes: usize, ratio: f64, seed: u64) -> Result<HoldoutSet> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Param(format!("hold-out ratio must be in (0, 1), got {ratio}")));
    }
    if n_nodes < 2 {
        return Err(Error::Param("need at least 2 nodes for a hold-out split".into()));
    }
    let size = (ratio * n_nodes as f64 + 1e-9).floor() as usize;
    if size == 0 || size >= n_nodes {
        return Err(Error::Param(format!(
            "hold-out of {size} nodes out of {n_nodes} leaves an empty side"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = rand::seq::index::sample(&mut rng, n_nodes, size).into_vec();
    HoldoutSet::new(n_nodes, indices)
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| DateTime::parse_from_rfc3339(s).ok().map(|d| d.naive_utc()))
}

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    ts.format("%Y-%m-%dT%H:%M:%S").to_string()
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Reads long-format `node_id,timestamp,speed,flow` rows. Empty cells are
/// missing; absent (node, timestamp) pairs are missing in both channels.
/// Node order follows `node_order` when given, else first appearance.
pub fn read_series_csv(path: &Path, node_order: Option<&[String]>) -> Result<SensorSeries> {
    #[derive(Deserialize)]
    struct Rec {
        node_id: String,
        timestamp: String,
        speed: Option<f64>,
        flow: Option<f64>,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut ids: Vec<String> = node_order.map(<[String]>::to_vec).unwrap_or_default();
    let mut index: HashMap<String, usize> =
        ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
    let mut records = Vec::new();
    for rec in rdr.deserialize::<Rec>() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let ts = parse_timestamp(&rec.timestamp).ok_or_else(|| {
            Error::parse(path, format!("bad ISO-8601 timestamp {:?}", rec.timestamp))
        })?;
        let node = match index.get(&rec.node_id) {
            Some(&i) => i,
            None if node_order.is_some() => {
                return Err(Error::parse(path, format!("unknown node id {:?}", rec.node_id)))
            }
            None => {
                ids.push(rec.node_id.clone());
                index.insert(rec.node_id.clone(), ids.len() - 1);
                ids.len() - 1
            }
        };
        records.push((node, ts, rec.speed, rec.flow));
    }
    if records.is_empty() {
        return Err(Error::parse(path, "no rows"));
    }
    let start = records.iter().map(|r| r.1).min().unwrap();
    let end = records.iter().map(|r| r.1).max().unwrap();
    let step = records
        .iter()
        .map(|r| (r.1 - start).num_seconds())
        .fold(0i64, gcd);
    let step = if step == 0 { 60 } else { step };
    if step % 60 != 0 {
        return Err(Error::parse(path, "timestamps must lie on a whole-minute grid"));
    }
    let t = ((end - start).num_seconds() / step) as usize + 1;
    let n = ids.len();
    let mut series = SensorSeries {
        node_ids: ids,
        start,
        interval_minutes: (step / 60) as u32,
        speed: Array2::zeros((n, t)),
        flow: Array2::zeros((n, t)),
        speed_missing: Array2::from_elem((n, t), true),
        flow_missing: Array2::from_elem((n, t), true),
    };
    for (node, ts, speed, flow) in records {
        let j = ((ts - start).num_seconds() / step) as usize;
        if let Some(v) = speed {
            series.speed[[node, j]] = v;
            series.speed_missing[[node, j]] = false;
        }
        if let Some(v) = flow {
            series.flow[[node, j]] = v;
            series.flow_missing[[node, j]] = false;
        }
    }
    series.validate().map_err(|e| Error::parse(path, e.to_string()))?;
    Ok(series)
}

pub fn write_series_csv(path: &Path, series: &SensorSeries) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wtr.write_record(["node_id", "timestamp", "speed", "flow"])
        .map_err(|e| csv_error(path, e))?;
    let stamps: Vec<String> = series.timestamps().iter().map(format_timestamp).collect();
    for i in 0..series.n() {
        for (j, ts) in stamps.iter().enumerate() {
            let speed = if series.speed_missing[[i, j]] {
                String::new()
            } else {
                series.speed[[i, j]].to_string()
            };
            let flow = if series.flow_missing[[i, j]] {
                String::new()
            } else {
                series.flow[[i, j]].to_string()
            };
            wtr.write_record([series.node_ids[i].as_str(), ts, &speed, &flow])
                .map_err(|e| csv_error(path, e))?;
        }
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Split boundaries, seed and normalizer statistics of a prepared dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub node_ids: Vec<String>,
    pub start: String,
    pub interval_minutes: u32,
    pub total_steps: usize,
    /// Start of validation and test segments.
    pub split_boundaries: [usize; 2],
    pub seed: u64,
    pub holdout: Vec<String>,
    pub normalizer: Normalizer,
}

const TENSOR_MAGIC: &[u8; 8] = b"HINTSER1";

/// Writes the normalized channels (N×T each, NaN where missing) and the
/// manifest next to it as `<stem>.json`.
pub fn write_prepared(
    tensor_path: &Path,
    manifest: &DataManifest,
    series: &SensorSeries,
) -> Result<()> {
    let norm = &manifest.normalizer;
    let (n, t) = series.speed.dim();
    let mut buf = Vec::with_capacity(24 + n * t * 16);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(t as u64).to_le_bytes());
    for (vals, missing, ch) in [
        (&series.speed, &series.speed_missing, Channel::Speed),
        (&series.flow, &series.flow_missing, Channel::Flow),
    ] {
        for (v, &m) in vals.iter().zip(missing.iter()) {
            let z = if m { f64::NAN } else { norm.normalize(*v, ch) };
            buf.extend_from_slice(&z.to_le_bytes());
        }
    }
    fs::write(tensor_path, buf).map_err(|e| Error::io(tensor_path, e))?;
    let mpath = tensor_path.with_extension("json");
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::parse(&mpath, e.to_string()))?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
}

/// Reads back the normalized `(speed, flow)` arrays written by [`write_prepared`].
pub fn read_prepared(tensor_path: &Path) -> Result<(DataManifest, Array2<f64>, Array2<f64>)> {
    let mpath = tensor_path.with_extension("json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DataManifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&mpath, e.to_string()))?;
    let buf = fs::read(tensor_path).map_err(|e| Error::io(tensor_path, e))?;
    if buf.len() < 24 || &buf[..8] != TENSOR_MAGIC {
        return Err(Error::Compat(format!("{}: not a prepared series", tensor_path.display())));
    }
    let n = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let t = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
    if buf.len() != 24 + 2 * n * t * 8 {
        return Err(Error::Compat(format!("{}: truncated", tensor_path.display())));
    }
    let vals: Vec<f64> = buf[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let speed = Array2::from_shape_vec((n, t), vals[..n * t].to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let flow = Array2::from_shape_vec((n, t), vals[n * t..].to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((manifest, speed, flow))
}
