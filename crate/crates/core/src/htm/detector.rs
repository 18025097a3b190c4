use std::path::Path;
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::encoder::{encode_values, EncoderConfig};
use super::likelihood::{AnomalyLikelihood, LikelihoodConfig};
use super::spatial::{SpatialPooler, SpatialPoolerConfig};
use super::temporal::{TemporalMemory, TemporalMemoryConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{hour_index, AlertEvent, MeshDataset, SensorReading, FEATURES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub encoder: EncoderConfig,
    pub spatial: SpatialPoolerConfig,
    pub temporal: TemporalMemoryConfig,
    pub likelihood: LikelihoodConfig,
    /// Alert when the likelihood reaches this value.
    pub threshold: f64,
    /// Hours after an alert during which the same sensor stays silent.
    pub cooldown_hours: i64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            spatial: SpatialPoolerConfig::default(),
            temporal: TemporalMemoryConfig::default(),
            likelihood: LikelihoodConfig::default(),
            threshold: 0.9999,
            cooldown_hours: 4,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.spatial.validate()?;
        self.temporal.validate()?;
        self.likelihood.validate()?;
        if self.spatial.n_columns != self.temporal.n_columns {
            return Err(Error::InvalidConfig(format!(
                "spatial pooler has {} columns, temporal memory {}",
                self.spatial.n_columns, self.temporal.n_columns
            )));
        }
        if self.threshold.is_nan() || self.cooldown_hours < 0 {
            return Err(Error::InvalidConfig("threshold must be a number and cooldown >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub raw: f64,
    pub likelihood: f64,
    pub alert: Option<AlertEvent>,
}

/// Encoder → spatial pooler → temporal memory → likelihood → threshold for
/// a single sensor. Learning never stops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDetector {
    sensor_id: String,
    cfg: DetectorConfig,
    spatial: SpatialPooler,
    temporal: TemporalMemory,
    likelihood: AnomalyLikelihood,
    last_alert_hour: Option<i64>,
    steps: u64,
}

impl StreamDetector {
    pub fn new(sensor_id: impl Into<String>, cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            sensor_id: sensor_id.into(),
            spatial: SpatialPooler::new(cfg.spatial.clone(), cfg.encoder.width())?,
            temporal: TemporalMemory::new(cfg.temporal.clone())?,
            likelihood: AnomalyLikelihood::new(cfg.likelihood.clone())?,
            cfg,
            last_alert_hour: None,
            steps: 0,
        })
    }

    pub fn sensor_id(&self) -> &str {
        &self.sensor_id
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn temporal(&self) -> &TemporalMemory {
        &self.temporal
    }

    pub fn spatial(&self) -> &SpatialPooler {
        &self.spatial
    }

    pub fn step(&mut self, timestamp: DateTime<Utc>, values: &[f64; FEATURES]) -> Result<StepOutcome> {
        let input = encode_values(&self.cfg.encoder, values)?;
        let columns = self.spatial.compute(&input, true)?;
        let raw = self.temporal.compute(&columns, true)?.anomaly;
        let likelihood = self.likelihood.update(raw);
        self.steps += 1;

        let hour = hour_index(&timestamp);
        let cooling = self
            .last_alert_hour
            .is_some_and(|last| hour - last < self.cfg.cooldown_hours);
        let alert = if likelihood >= self.cfg.threshold && !cooling {
            self.last_alert_hour = Some(hour);
            Some(AlertEvent {
                timestamp,
                sensor_id: self.sensor_id.clone(),
                raw_score: raw,
                likelihood,
                message: format!(
                    "anomalous readings on {}: likelihood {:.6}, raw score {:.3}",
                    self.sensor_id, likelihood, raw
                ),
            })
        } else {
            None
        };
        Ok(StepOutcome { raw, likelihood, alert })
    }

    pub fn process(&mut self, reading: &SensorReading) -> Result<StepOutcome> {
        if reading.sensor_id != self.sensor_id {
            return Err(Error::UnknownSensor(format!(
                "{} fed to the detector of {}",
                reading.sensor_id, self.sensor_id
            )));
        }
        self.step(reading.timestamp, &reading.values())
    }

    fn restore(&mut self) {
        self.spatial.restore();
    }
}

pub const SNAPSHOT_FORMAT: &str = "meshcast-htm-detectors";
pub const SNAPSHOT_VERSION: u32 = 1;

/// JSON container for detector state:
/// `{"format": "meshcast-htm-detectors", "version": 1, "detectors": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorSnapshot {
    pub format: String,
    pub version: u32,
    pub detectors: Vec<StreamDetector>,
}

impl DetectorSnapshot {
    pub fn new(detectors: Vec<StreamDetector>) -> Self {
        Self {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            detectors,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut snap: DetectorSnapshot = serde_json::from_str(text)?;
        if snap.format != SNAPSHOT_FORMAT || snap.version != SNAPSHOT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported detector snapshot {} v{}",
                snap.format, snap.version
            )));
        }
        snap.detectors.iter_mut().for_each(StreamDetector::restore);
        Ok(snap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub hour: usize,
    pub raw: f64,
    pub likelihood: f64,
}

#[derive(Debug, Clone)]
pub struct DetectionRun {
    /// Sorted by timestamp, then sensor order.
    pub alerts: Vec<AlertEvent>,
    /// Per sensor, one entry per observed hour.
    pub traces: Vec<Vec<StepTrace>>,
    /// Wall-clock seconds per processed reading, per sensor.
    pub latencies: Vec<Vec<f64>>,
}

/// Runs one independent detector per sensor over every observed hour.
pub fn detect_stream_traced(d: &MeshDataset, cfg: &DetectorConfig, exec: Exec) -> Result<DetectionRun> {
    cfg.validate()?;
    type PerSensor = (Vec<AlertEvent>, Vec<StepTrace>, Vec<f64>);
    let per_sensor: Vec<Result<PerSensor>> = exec.map_range(d.n_sensors(), |s| {
        let mut det = StreamDetector::new(d.sensor_ids()[s].clone(), cfg.clone())?;
        let mut alerts = Vec::new();
        let mut trace = Vec::new();
        let mut latency = Vec::new();
        for h in 0..d.hours() {
            if !d.observed(s, h) {
                continue;
            }
            let t0 = Instant::now();
            let out = det.step(d.timestamp(h), &d.triple(s, h))?;
            latency.push(t0.elapsed().as_secs_f64());
            trace.push(StepTrace {
                hour: h,
                raw: out.raw,
                likelihood: out.likelihood,
            });
            alerts.extend(out.alert);
        }
        Ok((alerts, trace, latency))
    });
    let mut alerts = Vec::new();
    let mut traces = Vec::new();
    let mut latencies = Vec::new();
    for r in per_sensor {
        let (a, t, l) = r?;
        alerts.extend(a);
        traces.push(t);
        latencies.push(l);
    }
    let order = |id: &str| d.sensor_index(id).unwrap_or(usize::MAX);
    alerts.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(order(&a.sensor_id).cmp(&order(&b.sensor_id))));
    Ok(DetectionRun {
        alerts,
        traces,
        latencies,
    })
}

pub fn detect_stream(d: &MeshDataset, cfg: &DetectorConfig, exec: Exec) -> Result<Vec<AlertEvent>> {
    Ok(detect_stream_traced(d, cfg, exec)?.alerts)
}
