//! Domain types shared by the whole pipeline.
//!
//! Everything here is an immutable value object. Timestamps are UTC and
//! truncated to the hour; missing observations are carried by a mask, never
//! by sentinel values.

use std::fmt;

use chrono::{DateTime, Duration, TimeZone, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURES: usize = 3;

pub const TEMPERATURE_RANGE: (f64, f64) = (-90.0, 60.0);
pub const HUMIDITY_RANGE: (f64, f64) = (0.0, 100.0);
pub const PRESSURE_RANGE: (f64, f64) = (300.0, 1100.0);

/// Feature order inside every value triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Temperature = 0,
    Humidity = 1,
    Pressure = 2,
}

impl Feature {
    pub const ALL: [Feature; FEATURES] = [Feature::Temperature, Feature::Humidity, Feature::Pressure];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::Temperature => "temperature",
            Feature::Humidity => "humidity",
            Feature::Pressure => "pressure",
        }
    }
}

/// Whole hours since the Unix epoch.
pub fn hour_index(ts: &DateTime<Utc>) -> i64 {
    ts.timestamp().div_euclid(3600)
}

pub fn hour_to_timestamp(hour: i64) -> DateTime<Utc> {
    Utc.timestamp_opt(hour * 3600, 0).single().expect("hour within chrono range")
}

pub fn is_whole_hour(ts: &DateTime<Utc>) -> bool {
    ts.minute() == 0 && ts.second() == 0 && ts.nanosecond() == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub sensor_id: String,
    pub timestamp: DateTime<Utc>,
    pub temperature: f64,
    pub humidity: f64,
    pub pressure: f64,
}

impl SensorReading {
    pub fn values(&self) -> [f64; FEATURES] {
        [self.temperature, self.humidity, self.pressure]
    }

    /// Bitwise equality of the measured triple.
    pub fn same_values(&self, other: &SensorReading) -> bool {
        self.values()
            .iter()
            .zip(other.values().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Violation {
    Temperature,
    Humidity,
    Pressure,
    Timestamp,
}

impl Violation {
    pub fn field(self) -> &'static str {
        match self {
            Violation::Temperature => "temperature",
            Violation::Humidity => "humidity",
            Violation::Pressure => "pressure",
            Violation::Timestamp => "timestamp",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.field())
    }
}

fn within(x: f64, (lo, hi): (f64, f64)) -> bool {
    x.is_finite() && x >= lo && x <= hi
}

/// Every physical-plausibility rule the reading breaks; empty means valid.
pub fn validate_reading(r: &SensorReading) -> Vec<Violation> {
    let mut out = Vec::new();
    if !within(r.temperature, TEMPERATURE_RANGE) {
        out.push(Violation::Temperature);
    }
    if !within(r.humidity, HUMIDITY_RANGE) {
        out.push(Violation::Humidity);
    }
    if !within(r.pressure, PRESSURE_RANGE) {
        out.push(Violation::Pressure);
    }
    if !is_whole_hour(&r.timestamp) {
        out.push(Violation::Timestamp);
    }
    out
}

/// Hourly readings of one sensor, strictly increasing in time.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSeries {
    sensor_id: String,
    readings: Vec<SensorReading>,
}

impl SensorSeries {
    pub fn new(sensor_id: impl Into<String>, readings: Vec<SensorReading>) -> Result<Self> {
        let sensor_id = sensor_id.into();
        for r in &readings {
            if r.sensor_id != sensor_id {
                return Err(Error::InvalidDataset(format!(
                    "reading for {} in series {}",
                    r.sensor_id, sensor_id
                )));
            }
            if !is_whole_hour(&r.timestamp) {
                return Err(Error::InvalidDataset(format!("{} is not on the hour", r.timestamp)));
            }
        }
        for pair in readings.windows(2) {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(Error::InvalidDataset(format!(
                    "timestamps not strictly increasing at {}",
                    pair[1].timestamp
                )));
            }
        }
        Ok(Self { sensor_id, readings })
    }

    pub fn sensor_id(&self) -> &str {
        &self.sensor_id
    }

    pub fn readings(&self) -> &[SensorReading] {
        &self.readings
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub min: f64,
    pub max: f64,
}

/// Per-feature min-max scaling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub ranges: Vec<FeatureRange>,
}

impl NormalizationParams {
    pub fn new(ranges: Vec<FeatureRange>) -> Result<Self> {
        let params = Self { ranges };
        params.check()?;
        Ok(params)
    }

    /// Maps every feature onto itself.
    pub fn identity() -> Self {
        Self {
            ranges: vec![FeatureRange { min: 0.0, max: 1.0 }; FEATURES],
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.ranges.len() != FEATURES {
            return Err(Error::Shape {
                expected: format!("{FEATURES} feature ranges"),
                actual: self.ranges.len().to_string(),
            });
        }
        for (f, r) in Feature::ALL.iter().zip(&self.ranges) {
            if !(r.max > r.min) || !r.min.is_finite() || !r.max.is_finite() {
                return Err(Error::Degenerate(format!("{} range [{}, {}]", f.name(), r.min, r.max)));
            }
        }
        Ok(())
    }

    pub fn scale(&self, feature: Feature, x: f64) -> f64 {
        let r = self.ranges[feature.index()];
        (x - r.min) / (r.max - r.min)
    }

    pub fn unscale(&self, feature: Feature, x: f64) -> f64 {
        let r = self.ranges[feature.index()];
        x * (r.max - r.min) + r.min
    }
}

/// Aligned sensors × hours × features grid with an observation mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshDataset {
    sensor_ids: Vec<String>,
    start: DateTime<Utc>,
    hours: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    norm: Option<NormalizationParams>,
}

/// `(sensor_ids, start, hours, values, mask, norm)`.
pub(crate) type MeshParts = (Vec<String>, DateTime<Utc>, usize, Vec<f64>, Vec<bool>, Option<NormalizationParams>);

impl MeshDataset {
    pub fn new(
        sensor_ids: Vec<String>,
        start: DateTime<Utc>,
        hours: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
        norm: Option<NormalizationParams>,
    ) -> Result<Self> {
        let n = sensor_ids.len();
        if n == 0 {
            return Err(Error::InvalidDataset("no sensors".into()));
        }
        if !is_whole_hour(&start) {
            return Err(Error::InvalidDataset(format!("start {start} is not on the hour")));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &sensor_ids {
            if !seen.insert(id) {
                return Err(Error::InvalidDataset(format!("duplicate sensor id {id}")));
            }
        }
        if values.len() != n * hours * FEATURES {
            return Err(Error::Shape {
                expected: format!("{} values", n * hours * FEATURES),
                actual: values.len().to_string(),
            });
        }
        if mask.len() != n * hours {
            return Err(Error::Shape {
                expected: format!("{} mask cells", n * hours),
                actual: mask.len().to_string(),
            });
        }
        for (cell, &observed) in mask.iter().enumerate() {
            if observed && values[cell * FEATURES..(cell + 1) * FEATURES].iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "non-finite observed value at sensor {}, hour {}",
                    sensor_ids[cell / hours],
                    cell % hours
                )));
            }
        }
        if let Some(p) = &norm {
            p.check()?;
        }
        Ok(Self {
            sensor_ids,
            start,
            hours,
            values,
            mask,
            norm,
        })
    }

    pub fn sensor_ids(&self) -> &[String] {
        &self.sensor_ids
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_ids.len()
    }

    pub fn hours(&self) -> usize {
        self.hours
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn norm(&self) -> Option<&NormalizationParams> {
        self.norm.as_ref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn sensor_index(&self, id: &str) -> Result<usize> {
        self.sensor_ids
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::UnknownSensor(id.to_string()))
    }

    pub fn timestamp(&self, hour: usize) -> DateTime<Utc> {
        self.start + Duration::hours(hour as i64)
    }

    fn cell(&self, sensor: usize, hour: usize) -> usize {
        sensor * self.hours + hour
    }

    pub fn observed(&self, sensor: usize, hour: usize) -> bool {
        self.mask[self.cell(sensor, hour)]
    }

    pub fn value(&self, sensor: usize, hour: usize, feature: Feature) -> f64 {
        self.values[self.cell(sensor, hour) * FEATURES + feature.index()]
    }

    pub fn triple(&self, sensor: usize, hour: usize) -> [f64; FEATURES] {
        let base = self.cell(sensor, hour) * FEATURES;
        [self.values[base], self.values[base + 1], self.values[base + 2]]
    }

    /// Every sensor observed at `hour`.
    pub fn hour_complete(&self, hour: usize) -> bool {
        (0..self.n_sensors()).all(|s| self.observed(s, hour))
    }

    pub fn reading(&self, sensor: usize, hour: usize) -> Option<SensorReading> {
        if !self.observed(sensor, hour) {
            return None;
        }
        let [t, h, p] = self.triple(sensor, hour);
        Some(SensorReading {
            sensor_id: self.sensor_ids[sensor].clone(),
            timestamp: self.timestamp(hour),
            temperature: t,
            humidity: h,
            pressure: p,
        })
    }

    /// Observed readings ordered by hour, then sensor.
    pub fn readings(&self) -> Vec<SensorReading> {
        (0..self.hours)
            .flat_map(|h| (0..self.n_sensors()).filter_map(move |s| self.reading(s, h)))
            .collect()
    }

    pub fn sensor_series(&self, sensor: usize) -> SensorSeries {
        let readings = (0..self.hours).filter_map(|h| self.reading(sensor, h)).collect();
        SensorSeries {
            sensor_id: self.sensor_ids[sensor].clone(),
            readings,
        }
    }

    /// Observed fraction of all cells.
    pub fn coverage(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len().max(1) as f64
    }

    /// Hours `[from, to)` as a new dataset sharing sensors and normalization.
    pub fn slice_hours(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.hours {
            return Err(Error::InvalidDataset(format!(
                "hour range {from}..{to} outside 0..{}",
                self.hours
            )));
        }
        let len = to - from;
        let n = self.n_sensors();
        let mut values = Vec::with_capacity(n * len * FEATURES);
        let mut mask = Vec::with_capacity(n * len);
        for s in 0..n {
            let a = self.cell(s, from);
            let b = self.cell(s, to);
            values.extend_from_slice(&self.values[a * FEATURES..b * FEATURES]);
            mask.extend_from_slice(&self.mask[a..b]);
        }
        Ok(Self {
            sensor_ids: self.sensor_ids.clone(),
            start: self.timestamp(from),
            hours: len,
            values,
            mask,
            norm: self.norm.clone(),
        })
    }

    pub(crate) fn into_parts(self) -> MeshParts {
        (self.sensor_ids, self.start, self.hours, self.values, self.mask, self.norm)
    }

    /// Same grid and mask with new values; values must stay finite where observed.
    pub(crate) fn with_values(&self, values: Vec<f64>, norm: Option<NormalizationParams>) -> Result<Self> {
        Self::new(self.sensor_ids.clone(), self.start, self.hours, values, self.mask.clone(), norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    TempSpike,
    HumidityExtreme,
    PressureRamp,
    StuckSensor,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::TempSpike,
        AnomalyKind::HumidityExtreme,
        AnomalyKind::PressureRamp,
        AnomalyKind::StuckSensor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::TempSpike => "temp_spike",
            AnomalyKind::HumidityExtreme => "humidity_extreme",
            AnomalyKind::PressureRamp => "pressure_ramp",
            AnomalyKind::StuckSensor => "stuck_sensor",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AnomalyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown anomaly kind {s:?}")))
    }
}

/// Ground-truth anomalous window, inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyLabel {
    pub sensor_id: String,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub kind: AnomalyKind,
}

impl AnomalyLabel {
    pub fn new(sensor_id: impl Into<String>, start: DateTime<Utc>, end: DateTime<Utc>, kind: AnomalyKind) -> Result<Self> {
        if end < start {
            return Err(Error::InvalidDataset(format!("label ends ({end}) before it starts ({start})")));
        }
        Ok(Self {
            sensor_id: sensor_id.into(),
            start,
            end,
            kind,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub timestamp: DateTime<Utc>,
    pub sensor_id: String,
    pub raw_score: f64,
    pub likelihood: f64,
    pub message: String,
}
