//! Rack telemetry: resampling onto a uniform grid, rack-level aggregation,
//! lookback/horizon windowing and a seeded simulator.

mod io;
mod sim;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use io::{read_csv, read_jsonl, read_points, telemetry_digest, write_csv, write_jsonl, TelemetryIoError};
pub use sim::{simulate, Baseline, BandSide, Episode, SimConfig, SimError};

use crate::rulesdb::Metric;

/// Telemetry channels are the rule metrics.
pub type Channel = Metric;

/// Fixed channel order of every series matrix and window.
pub const CHANNEL_ORDER: [Channel; 3] = [Metric::PowerKw, Metric::TemperatureC, Metric::HumidityRh];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryPoint {
    pub timestamp: i64,
    pub customer: String,
    #[serde(rename = "rack")]
    pub rack_id: String,
    pub channel: Channel,
    #[serde(rename = "sensor")]
    pub sensor_id: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TelemetryError {
    #[error("no telemetry points")]
    EmptyInput,
    #[error("cadence must be positive")]
    ZeroCadence,
    #[error("points span several channels; expected {expected}")]
    MixedChannels { expected: Channel },
    #[error("points span several racks; expected {expected}")]
    MixedRacks { expected: String },
    #[error("non-finite value at t={timestamp}")]
    NonFinite { timestamp: i64 },
    #[error("series has {steps} steps, a window needs {needed}")]
    SeriesTooShort { steps: usize, needed: usize },
    #[error("window lengths and stride must be positive")]
    InvalidWindowing,
}

/// A channel on a uniform time grid. `None` marks a gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformSeries {
    pub channel: Channel,
    pub cadence_s: u64,
    pub start: i64,
    pub values: Vec<Option<f64>>,
}

impl UniformSeries {
    pub fn end(&self) -> i64 {
        self.start + self.values.len() as i64 * self.cadence_s as i64
    }

    pub fn timestamp(&self, step: usize) -> i64 {
        self.start + step as i64 * self.cadence_s as i64
    }

    pub fn value_at(&self, t: i64) -> Option<f64> {
        if t < self.start {
            return None;
        }
        let step = ((t - self.start) / self.cadence_s as i64) as usize;
        self.values.get(step).copied().flatten()
    }
}

/// Rack aggregate plus a per-bin flag marking bins where some sensors were
/// missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedSeries {
    pub series: UniformSeries,
    pub partial: Vec<bool>,
}

fn bin_of(t: i64, cadence_s: u64) -> i64 {
    t.div_euclid(cadence_s as i64)
}

fn check_points(points: &[TelemetryPoint], cadence_s: u64) -> Result<(), TelemetryError> {
    if cadence_s == 0 {
        return Err(TelemetryError::ZeroCadence);
    }
    if points.is_empty() {
        return Err(TelemetryError::EmptyInput);
    }
    if let Some(p) = points.iter().find(|p| !p.value.is_finite()) {
        return Err(TelemetryError::NonFinite { timestamp: p.timestamp });
    }
    Ok(())
}

/// Per-bin means on a grid aligned to multiples of `cadence_s`. Bins with no
/// points are gaps. Input order does not matter.
pub fn resample(points: &[TelemetryPoint], cadence_s: u64) -> Result<UniformSeries, TelemetryError> {
    check_points(points, cadence_s)?;
    let channel = points[0].channel;
    if points.iter().any(|p| p.channel != channel) {
        return Err(TelemetryError::MixedChannels { expected: channel });
    }
    let mut sorted: Vec<&TelemetryPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.sensor_id.cmp(&b.sensor_id))
            .then_with(|| a.value.total_cmp(&b.value))
    });
    let first = bin_of(sorted[0].timestamp, cadence_s);
    let last = bin_of(sorted[sorted.len() - 1].timestamp, cadence_s);
    let n = (last - first + 1) as usize;
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for p in sorted {
        let i = (bin_of(p.timestamp, cadence_s) - first) as usize;
        sums[i] += p.value;
        counts[i] += 1;
    }
    Ok(UniformSeries {
        channel,
        cadence_s,
        start: first * cadence_s as i64,
        values: sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| (c > 0).then(|| s / c as f64))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Combine {
    Sum,
    Mean,
}

/// Resample each sensor separately, then combine sensors per bin over the
/// common grid `[first_bin, first_bin + steps)`.
fn combine_sensors(
    points: &[&TelemetryPoint],
    channel: Channel,
    cadence_s: u64,
    first_bin: i64,
    steps: usize,
    how: Combine,
) -> AggregatedSeries {
    let mut by_sensor: BTreeMap<&str, Vec<TelemetryPoint>> = BTreeMap::new();
    for p in points {
        by_sensor.entry(p.sensor_id.as_str()).or_default().push((*p).clone());
    }
    let n_sensors = by_sensor.len();
    let mut totals = vec![0.0; steps];
    let mut present = vec![0usize; steps];
    for sensor_points in by_sensor.values() {
        let s = resample(sensor_points, cadence_s).expect("non-empty single-channel sensor");
        let offset = (bin_of(s.start, cadence_s) - first_bin) as usize;
        for (i, v) in s.values.iter().enumerate() {
            if let Some(v) = v {
                totals[offset + i] += v;
                present[offset + i] += 1;
            }
        }
    }
    let values = totals
        .iter()
        .zip(&present)
        .map(|(&t, &c)| match (c, how) {
            (0, _) => None,
            (_, Combine::Sum) => Some(t),
            (c, Combine::Mean) => Some(t / c as f64),
        })
        .collect();
    AggregatedSeries {
        series: UniformSeries { channel, cadence_s, start: first_bin * cadence_s as i64, values },
        partial: present.iter().map(|&c| c > 0 && c < n_sensors).collect(),
    }
}

fn span(points: &[&TelemetryPoint], cadence_s: u64) -> (i64, usize) {
    let first = points.iter().map(|p| bin_of(p.timestamp, cadence_s)).min().unwrap_or(0);
    let last = points.iter().map(|p| bin_of(p.timestamp, cadence_s)).max().unwrap_or(-1);
    (first, (last - first + 1).max(0) as usize)
}

/// Rack-level power: per bin, the sum over sensors of each sensor's bin
/// mean. Bins where only some sensors reported use the ones available and
/// are flagged partial.
pub fn rack_power_aggregate(
    points: &[TelemetryPoint],
    cadence_s: u64,
) -> Result<AggregatedSeries, TelemetryError> {
    check_points(points, cadence_s)?;
    if points.iter().any(|p| p.channel != Metric::PowerKw) {
        return Err(TelemetryError::MixedChannels { expected: Metric::PowerKw });
    }
    let rack = &points[0].rack_id;
    if points.iter().any(|p| &p.rack_id != rack) {
        return Err(TelemetryError::MixedRacks { expected: rack.clone() });
    }
    let refs: Vec<&TelemetryPoint> = points.iter().collect();
    let (first, steps) = span(&refs, cadence_s);
    Ok(combine_sensors(&refs, Metric::PowerKw, cadence_s, first, steps, Combine::Sum))
}

/// All channels of one rack on a shared grid. Power is the rack sum,
/// temperature and humidity the mean over sensors. A row is a gap when any
/// channel is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMatrix {
    pub customer: String,
    pub rack_id: String,
    pub cadence_s: u64,
    pub start: i64,
    pub channels: Vec<Channel>,
    pub rows: Vec<Option<Vec<f64>>>,
    pub partial: Vec<bool>,
}

impl SeriesMatrix {
    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn timestamp(&self, step: usize) -> i64 {
        self.start + step as i64 * self.cadence_s as i64
    }
}

/// Build the matrix for a single rack.
pub fn build_matrix(points: &[TelemetryPoint], cadence_s: u64) -> Result<SeriesMatrix, TelemetryError> {
    check_points(points, cadence_s)?;
    let rack = &points[0].rack_id;
    if points.iter().any(|p| &p.rack_id != rack) {
        return Err(TelemetryError::MixedRacks { expected: rack.clone() });
    }
    let refs: Vec<&TelemetryPoint> = points.iter().collect();
    let (first, steps) = span(&refs, cadence_s);
    let mut per_channel = Vec::with_capacity(CHANNEL_ORDER.len());
    for channel in CHANNEL_ORDER {
        let ch: Vec<&TelemetryPoint> = refs.iter().copied().filter(|p| p.channel == channel).collect();
        let how = if channel == Metric::PowerKw { Combine::Sum } else { Combine::Mean };
        per_channel.push(if ch.is_empty() {
            None
        } else {
            Some(combine_sensors(&ch, channel, cadence_s, first, steps, how))
        });
    }
    let mut rows = Vec::with_capacity(steps);
    let mut partial = Vec::with_capacity(steps);
    for i in 0..steps {
        let mut row = Vec::with_capacity(CHANNEL_ORDER.len());
        let mut is_partial = false;
        for agg in &per_channel {
            match agg.as_ref().and_then(|a| a.series.values[i].map(|v| (v, a.partial[i]))) {
                Some((v, p)) => {
                    row.push(v);
                    is_partial |= p;
                }
                None => break,
            }
        }
        if row.len() == CHANNEL_ORDER.len() {
            rows.push(Some(row));
        } else {
            rows.push(None);
        }
        partial.push(is_partial);
    }
    Ok(SeriesMatrix {
        customer: points[0].customer.clone(),
        rack_id: rack.clone(),
        cadence_s,
        start: first * cadence_s as i64,
        channels: CHANNEL_ORDER.to_vec(),
        rows,
        partial,
    })
}

/// Split points by (customer, rack) and build one matrix per rack, ordered
/// by customer then rack id.
pub fn build_matrices(
    points: &[TelemetryPoint],
    cadence_s: u64,
) -> Result<Vec<SeriesMatrix>, TelemetryError> {
    let mut groups: BTreeMap<(&str, &str), Vec<TelemetryPoint>> = BTreeMap::new();
    for p in points {
        groups.entry((p.customer.as_str(), p.rack_id.as_str())).or_default().push(p.clone());
    }
    if groups.is_empty() {
        return Err(TelemetryError::EmptyInput);
    }
    groups.values().map(|g| build_matrix(g, cadence_s)).collect()
}

/// Lookback/horizon lengths (steps) and window stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub cadence_s: u64,
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    /// 30 s cadence: 60 steps = 30 min of lookback, 90 steps = 45 min ahead.
    fn default() -> Self {
        Self { cadence_s: 30, lookback: 60, horizon: 90, stride: 10 }
    }
}

impl WindowConfig {
    fn check(&self) -> Result<(), TelemetryError> {
        if self.lookback == 0 || self.horizon == 0 || self.stride == 0 || self.cadence_s == 0 {
            Err(TelemetryError::InvalidWindowing)
        } else {
            Ok(())
        }
    }
}

/// Lookback matrix (steps x channels) plus, for training, the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub customer: String,
    pub rack_id: String,
    /// First lookback timestamp.
    pub start: i64,
    /// End of the lookback (exclusive); the horizon starts here.
    pub end: i64,
    pub cadence_s: u64,
    pub channel_order: Vec<Channel>,
    pub lookback: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub future: Option<Vec<Vec<f64>>>,
}

impl Window {
    pub fn channel_index(&self, channel: Channel) -> Option<usize> {
        self.channel_order.iter().position(|&c| c == channel)
    }

    pub fn horizon_end(&self) -> i64 {
        self.end + self.future.as_ref().map_or(0, |f| f.len() as i64) * self.cadence_s as i64
    }
}

/// Number of windows a gap-free series of `steps` rows yields.
pub fn window_count(steps: usize, cfg: &WindowConfig) -> usize {
    let need = cfg.lookback + cfg.horizon;
    if steps < need || cfg.stride == 0 {
        0
    } else {
        (steps - need) / cfg.stride + 1
    }
}

/// Training windows: lookback plus horizon, starting every `stride` steps.
/// Windows touching a gap are dropped.
pub fn make_windows(matrix: &SeriesMatrix, cfg: &WindowConfig) -> Result<Vec<Window>, TelemetryError> {
    cfg.check()?;
    let need = cfg.lookback + cfg.horizon;
    if matrix.steps() < need {
        return Err(TelemetryError::SeriesTooShort { steps: matrix.steps(), needed: need });
    }
    // gaps_before[i] = number of gap rows in [0, i)
    let mut gaps_before = Vec::with_capacity(matrix.steps() + 1);
    gaps_before.push(0usize);
    for row in &matrix.rows {
        gaps_before.push(gaps_before.last().unwrap() + usize::from(row.is_none()));
    }
    let mut windows = Vec::new();
    let mut s = 0;
    while s + need <= matrix.steps() {
        if gaps_before[s + need] == gaps_before[s] {
            let row = |i: usize| matrix.rows[i].clone().expect("gap-free span");
            windows.push(Window {
                customer: matrix.customer.clone(),
                rack_id: matrix.rack_id.clone(),
                start: matrix.timestamp(s),
                end: matrix.timestamp(s + cfg.lookback),
                cadence_s: matrix.cadence_s,
                channel_order: matrix.channels.clone(),
                lookback: (s..s + cfg.lookback).map(row).collect(),
                future: Some((s + cfg.lookback..s + need).map(row).collect()),
            });
        }
        s += cfg.stride;
    }
    Ok(windows)
}

/// Racks and sensors present in a point set, for reporting.
pub fn inventory(points: &[TelemetryPoint]) -> BTreeMap<String, BTreeSet<(Channel, String)>> {
    let mut inv: BTreeMap<String, BTreeSet<(Channel, String)>> = BTreeMap::new();
    for p in points {
        inv.entry(p.rack_id.clone()).or_default().insert((p.channel, p.sensor_id.clone()));
    }
    inv
}
