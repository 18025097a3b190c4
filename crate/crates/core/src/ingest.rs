//! CSV ingestion and preprocessing.
//!
//! The on-disk format is one reading per row:
//!
//! ```text
//! timestamp,sensor_id,temperature_c,humidity_pct,pressure_hpa
//! 2024-01-01T00:00:00Z,s1,25.0,60.0,1005.0
//! ```
//!
//! Timestamps are RFC 3339 and must fall on the hour. Numbers use `.` as the
//! decimal separator and are written in shortest round-trip form, so a
//! dataset survives a write/parse cycle bit-for-bit.

use std::collections::HashMap;
use std::fmt::Write as _;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    hour_index, hour_to_timestamp, validate_reading, Feature, FeatureRange, MeshDataset, NormalizationParams,
    SensorReading, SensorSeries, Violation, FEATURES,
};

pub const CSV_HEADER: &str = "timestamp,sensor_id,temperature_c,humidity_pct,pressure_hpa";
const COLUMNS: [&str; 5] = ["timestamp", "sensor_id", "temperature_c", "humidity_pct", "pressure_hpa"];

/// A data row that parsed but failed plausibility validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    /// 1-based line number in the file (the header is line 1).
    pub line: usize,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedCsv {
    pub readings: Vec<SensorReading>,
    pub rejected: Vec<RejectedRow>,
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s.trim()).ok().map(|t| t.with_timezone(&Utc))
}

fn malformed(line: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Malformed {
        row: line,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Parses the reading CSV. Malformed rows abort the parse; implausible rows
/// are collected in [`ParsedCsv::rejected`].
pub fn parse_csv(text: &str) -> Result<ParsedCsv> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = ParsedCsv::default();
    let mut header_seen = false;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if !header_seen {
            header_seen = true;
            let cols: Vec<&str> = record.iter().map(str::trim).collect();
            if cols != COLUMNS {
                return Err(malformed(line, "header", format!("expected `{CSV_HEADER}`")));
            }
            continue;
        }
        if record.len() == 1 && record.get(0).is_some_and(|f| f.trim().is_empty()) {
            continue;
        }
        if record.len() != COLUMNS.len() {
            return Err(malformed(
                line,
                "*",
                format!("expected {} columns, found {}", COLUMNS.len(), record.len()),
            ));
        }
        let timestamp =
            parse_timestamp(&record[0]).ok_or_else(|| malformed(line, COLUMNS[0], format!("bad timestamp {:?}", &record[0])))?;
        let sensor_id = record[1].trim().to_string();
        if sensor_id.is_empty() {
            return Err(malformed(line, COLUMNS[1], "empty sensor id"));
        }
        let mut nums = [0.0; 3];
        for (k, slot) in nums.iter_mut().enumerate() {
            let raw = record[2 + k].trim();
            *slot = raw
                .parse::<f64>()
                .map_err(|_| malformed(line, COLUMNS[2 + k], format!("not a number: {raw:?}")))?;
        }
        let reading = SensorReading {
            sensor_id,
            timestamp,
            temperature: nums[0],
            humidity: nums[1],
            pressure: nums[2],
        };
        let violations = validate_reading(&reading);
        if violations.is_empty() {
            out.readings.push(reading);
        } else {
            out.rejected.push(RejectedRow { line, violations });
        }
    }
    Ok(out)
}

pub fn csv_row(r: &SensorReading) -> String {
    format!(
        "{},{},{},{},{}",
        format_timestamp(&r.timestamp),
        r.sensor_id,
        r.temperature,
        r.humidity,
        r.pressure
    )
}

pub fn write_csv(readings: &[SensorReading]) -> String {
    let mut s = String::with_capacity(48 * (readings.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in readings {
        let _ = writeln!(s, "{}", csv_row(r));
    }
    s
}

/// Drops the third and later readings of every run of consecutive hours
/// carrying bitwise-identical values. Returns the filtered series and the
/// number of readings removed.
pub fn dedup_filter(series: &SensorSeries) -> (SensorSeries, usize) {
    let readings = series.readings();
    let mut kept = Vec::with_capacity(readings.len());
    let mut run = 0usize;
    for (i, r) in readings.iter().enumerate() {
        let continues = i > 0 && {
            let prev = &readings[i - 1];
            hour_index(&r.timestamp) - hour_index(&prev.timestamp) == 1 && r.same_values(prev)
        };
        run = if continues { run + 1 } else { 1 };
        if run <= 2 {
            kept.push(r.clone());
        }
    }
    let removed = readings.len() - kept.len();
    let out = SensorSeries::new(series.sensor_id(), kept).expect("subsequence of a valid series is valid");
    (out, removed)
}

/// Builds the aligned grid spanning the earliest to the latest reading.
/// Sensors are ordered by first appearance. Repeated identical readings are
/// tolerated; conflicting ones are an error.
pub fn align_mesh(readings: &[SensorReading]) -> Result<MeshDataset> {
    if readings.is_empty() {
        return Err(Error::InvalidDataset("no readings to align".into()));
    }
    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for r in readings {
        if !index.contains_key(r.sensor_id.as_str()) {
            index.insert(&r.sensor_id, ids.len());
            ids.push(r.sensor_id.clone());
        }
    }
    let first = readings.iter().map(|r| hour_index(&r.timestamp)).min().unwrap();
    let last = readings.iter().map(|r| hour_index(&r.timestamp)).max().unwrap();
    let hours = (last - first + 1) as usize;
    let n = ids.len();
    let mut values = vec![f64::NAN; n * hours * FEATURES];
    let mut mask = vec![false; n * hours];
    for r in readings {
        let s = index[r.sensor_id.as_str()];
        let h = (hour_index(&r.timestamp) - first) as usize;
        let cell = s * hours + h;
        let base = cell * FEATURES;
        let vals = r.values();
        if mask[cell] {
            let same = values[base..base + FEATURES]
                .iter()
                .zip(vals.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::Conflict {
                    sensor: r.sensor_id.clone(),
                    timestamp: format_timestamp(&r.timestamp),
                });
            }
            continue;
        }
        values[base..base + FEATURES].copy_from_slice(&vals);
        mask[cell] = true;
    }
    MeshDataset::new(ids, hour_to_timestamp(first), hours, values, mask, None)
}

/// Runs the duplicate rule on each sensor of a dataset; removed cells
/// become gaps. Returns the per-sensor removed counts.
pub fn dedup_dataset(d: &MeshDataset) -> Result<(MeshDataset, Vec<usize>)> {
    let mut mask = d.mask().to_vec();
    let mut removed = Vec::with_capacity(d.n_sensors());
    for s in 0..d.n_sensors() {
        let series = d.sensor_series(s);
        let (kept, count) = dedup_filter(&series);
        removed.push(count);
        if count == 0 {
            continue;
        }
        for h in 0..d.hours() {
            mask[s * d.hours() + h] = false;
        }
        for r in kept.readings() {
            let h = (hour_index(&r.timestamp) - hour_index(&d.start())) as usize;
            mask[s * d.hours() + h] = true;
        }
    }
    let (ids, start, hours, values, _, norm) = d.clone().into_parts();
    Ok((MeshDataset::new(ids, start, hours, values, mask, norm)?, removed))
}

/// Lengths of every interior and edge gap, per sensor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub missing_cells: usize,
    pub gaps: usize,
    pub longest_gap: usize,
}

pub fn gap_stats(d: &MeshDataset) -> GapStats {
    let mut stats = GapStats::default();
    for s in 0..d.n_sensors() {
        let mut run = 0;
        for h in 0..=d.hours() {
            if h < d.hours() && !d.observed(s, h) {
                run += 1;
                stats.missing_cells += 1;
            } else if run > 0 {
                stats.gaps += 1;
                stats.longest_gap = stats.longest_gap.max(run);
                run = 0;
            }
        }
    }
    stats
}

/// Linearly interpolates interior gaps of at most `max_gap` hours.
pub fn fill_gaps(d: &MeshDataset, max_gap: usize) -> MeshDataset {
    let (ids, start, hours, mut values, mut mask, norm) = d.clone().into_parts();
    for s in 0..ids.len() {
        let row = s * hours;
        let mut last_seen: Option<usize> = None;
        for h in 0..hours {
            if !mask[row + h] {
                continue;
            }
            if let Some(left) = last_seen {
                let gap = h - left - 1;
                if gap > 0 && gap <= max_gap {
                    let span = (h - left) as f64;
                    for g in left + 1..h {
                        let w = (g - left) as f64 / span;
                        for f in 0..FEATURES {
                            let a = values[(row + left) * FEATURES + f];
                            let b = values[(row + h) * FEATURES + f];
                            values[(row + g) * FEATURES + f] = a + (b - a) * w;
                        }
                        mask[row + g] = true;
                    }
                }
            }
            last_seen = Some(h);
        }
    }
    MeshDataset::new(ids, start, hours, values, mask, norm).expect("interpolation keeps the grid valid")
}

/// Per-feature min/max over observed cells.
pub fn fit_normalizer(d: &MeshDataset) -> Result<NormalizationParams> {
    let mut ranges = vec![
        FeatureRange {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY
        };
        FEATURES
    ];
    for s in 0..d.n_sensors() {
        for h in 0..d.hours() {
            if !d.observed(s, h) {
                continue;
            }
            for (f, r) in d.triple(s, h).iter().zip(ranges.iter_mut()) {
                r.min = r.min.min(*f);
                r.max = r.max.max(*f);
            }
        }
    }
    for (feature, r) in Feature::ALL.iter().zip(&ranges) {
        if !(r.max > r.min) {
            return Err(Error::Degenerate(format!("{} has fewer than two distinct values", feature.name())));
        }
    }
    NormalizationParams::new(ranges)
}

fn map_observed(d: &MeshDataset, params: &NormalizationParams, f: impl Fn(Feature, f64) -> f64) -> Result<Vec<f64>> {
    params.check()?;
    let mut values = d.values().to_vec();
    for (cell, &observed) in d.mask().iter().enumerate() {
        if observed {
            for feature in Feature::ALL {
                let v = &mut values[cell * FEATURES + feature.index()];
                *v = f(feature, *v);
            }
        }
    }
    Ok(values)
}

pub fn apply_normalizer(d: &MeshDataset, params: &NormalizationParams) -> Result<MeshDataset> {
    let values = map_observed(d, params, |f, x| params.scale(f, x))?;
    d.with_values(values, Some(params.clone()))
}

pub fn invert_normalizer(d: &MeshDataset, params: &NormalizationParams) -> Result<MeshDataset> {
    let values = map_observed(d, params, |f, x| params.unscale(f, x))?;
    d.with_values(values, None)
}

/// One supervised example: `window` hours of every sensor's features and
/// the target sensor's temperature `horizon` hours after the last row.
///
/// Each input row lists the target sensor's triple first, followed by the
/// remaining sensors in dataset order, so one model serves every target.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedExample {
    pub inputs: Vec<f64>,
    pub window: usize,
    pub width: usize,
    pub target: f64,
    pub target_sensor_index: usize,
    pub anchor: usize,
}

impl WindowedExample {
    pub fn row(&self, step: usize) -> &[f64] {
        &self.inputs[step * self.width..(step + 1) * self.width]
    }
}

/// Sensor order used for input rows when `target` is the target sensor.
pub fn slot_order(n_sensors: usize, target: usize) -> Vec<usize> {
    std::iter::once(target).chain((0..n_sensors).filter(|&s| s != target)).collect()
}

/// Fills `out` with one input row for `hour`.
pub(crate) fn write_row(d: &MeshDataset, order: &[usize], hour: usize, out: &mut [f64]) {
    for (slot, &s) in order.iter().enumerate() {
        out[slot * FEATURES..(slot + 1) * FEATURES].copy_from_slice(&d.triple(s, hour));
    }
}

/// Whether the window ending at `anchor` and its target cell are usable.
pub fn window_valid(d: &MeshDataset, target: usize, window: usize, horizon: usize, anchor: usize) -> bool {
    anchor + 1 >= window
        && anchor + horizon < d.hours()
        && d.observed(target, anchor + horizon)
        && (anchor + 1 - window..=anchor).all(|h| d.hour_complete(h))
}

pub fn make_windows(d: &MeshDataset, target: usize, window: usize, horizon: usize) -> Result<Vec<WindowedExample>> {
    if window < 1 || horizon < 1 {
        return Err(Error::InvalidConfig(format!("window={window}, horizon={horizon}; both must be >= 1")));
    }
    if target >= d.n_sensors() {
        return Err(Error::UnknownSensor(format!("index {target}")));
    }
    let hours = d.hours();
    // incomplete[h] = number of incomplete hours in [0, h)
    let mut incomplete = vec![0usize; hours + 1];
    for h in 0..hours {
        incomplete[h + 1] = incomplete[h] + usize::from(!d.hour_complete(h));
    }
    let width = d.n_sensors() * FEATURES;
    let order = slot_order(d.n_sensors(), target);
    let mut out = Vec::new();
    if hours < window + horizon {
        return Ok(out);
    }
    for anchor in window - 1..hours - horizon {
        let from = anchor + 1 - window;
        if incomplete[anchor + 1] - incomplete[from] != 0 || !d.observed(target, anchor + horizon) {
            continue;
        }
        let mut inputs = vec![0.0; window * width];
        for (step, hour) in (from..=anchor).enumerate() {
            write_row(d, &order, hour, &mut inputs[step * width..(step + 1) * width]);
        }
        out.push(WindowedExample {
            inputs,
            window,
            width,
            target: d.value(target, anchor + horizon, Feature::Temperature),
            target_sensor_index: target,
            anchor,
        });
    }
    Ok(out)
}
