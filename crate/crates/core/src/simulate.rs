//! Synthetic sensor mesh with labeled anomalies, and a replay client that
//! streams it to the gateway.
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64` with Gaussian draws
//! from `rand_distr::StandardNormal`. Draw order for [`gen_weather`]: sensor
//! biases (sensor-major, feature order), then for every hour the shared AR(1)
//! noise innovation per feature followed by each sensor's independent noise
//! per feature.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration as StdDuration;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{Ack, WireRecord};
use crate::ingest::{format_timestamp, parse_timestamp};
use crate::model::{
    AnomalyKind, AnomalyLabel, Feature, MeshDataset, FEATURES, HUMIDITY_RANGE, PRESSURE_RANGE, TEMPERATURE_RANGE,
};

/// Recorded in report headers so datasets can be regenerated elsewhere.
pub const GENERATOR: &str = "ChaCha8Rng (rand_chacha 0.9, seed_from_u64); gaussian = rand_distr 0.5 StandardNormal";

/// Generative parameters for one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalConfig {
    pub base: f64,
    pub diurnal_amplitude: f64,
    /// Radians added to the daily sine.
    pub phase: f64,
    pub trend_per_day: f64,
    /// Stationary standard deviation of the noise shared by all sensors.
    pub spatial_noise_sd: f64,
    pub sensor_bias_sd: f64,
    /// Independent per-sensor noise.
    pub sensor_noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_sensors: usize,
    pub n_days: usize,
    pub seed: u64,
    pub start: DateTime<Utc>,
    pub temperature: SignalConfig,
    pub humidity: SignalConfig,
    pub pressure: SignalConfig,
    /// AR(1) coefficient of the shared noise process; 0 gives white noise.
    pub noise_ar: f64,
    /// Values are rounded to this step (sensor resolution); 0 disables.
    pub resolution: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        // warmest around 14:00 UTC, most humid around 02:00 UTC
        let temp_phase = PI / 2.0 - 2.0 * PI * 14.0 / 24.0;
        Self {
            n_sensors: 5,
            n_days: 90,
            seed: 42,
            start: parse_timestamp("2024-01-01T00:00:00Z").unwrap(),
            temperature: SignalConfig {
                base: 27.0,
                diurnal_amplitude: 4.0,
                phase: temp_phase,
                trend_per_day: 0.02,
                spatial_noise_sd: 0.5,
                sensor_bias_sd: 0.5,
                sensor_noise_sd: 0.1,
            },
            humidity: SignalConfig {
                base: 70.0,
                diurnal_amplitude: 10.0,
                phase: temp_phase + PI,
                trend_per_day: -0.02,
                spatial_noise_sd: 2.0,
                sensor_bias_sd: 2.0,
                sensor_noise_sd: 0.5,
            },
            pressure: SignalConfig {
                base: 1008.0,
                diurnal_amplitude: 1.0,
                phase: 0.0,
                trend_per_day: 0.0,
                spatial_noise_sd: 1.0,
                sensor_bias_sd: 0.5,
                sensor_noise_sd: 0.1,
            },
            noise_ar: 0.9,
            resolution: 0.01,
        }
    }
}

impl SimConfig {
    pub fn signal(&self, f: Feature) -> &SignalConfig {
        match f {
            Feature::Temperature => &self.temperature,
            Feature::Humidity => &self.humidity,
            Feature::Pressure => &self.pressure,
        }
    }

    pub fn hours(&self) -> usize {
        self.n_days * 24
    }

    pub fn sensor_ids(&self) -> Vec<String> {
        (1..=self.n_sensors).map(|i| format!("s{i}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sensors < 2 {
            return Err(Error::InvalidConfig("n_sensors must be >= 2".into()));
        }
        if self.n_days < 2 {
            return Err(Error::InvalidConfig("n_days must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.noise_ar) {
            return Err(Error::InvalidConfig("noise_ar must lie in [0, 1)".into()));
        }
        if !(self.resolution >= 0.0) {
            return Err(Error::InvalidConfig("resolution must be >= 0".into()));
        }
        for f in Feature::ALL {
            let s = self.signal(f);
            let nonneg = [s.diurnal_amplitude, s.spatial_noise_sd, s.sensor_bias_sd, s.sensor_noise_sd];
            if nonneg.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidConfig(format!("{} amplitudes and deviations must be >= 0", f.name())));
            }
            if ![s.base, s.phase, s.trend_per_day].iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{} parameters must be finite", f.name())));
            }
        }
        Ok(())
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn plausible_range(f: Feature) -> (f64, f64) {
    match f {
        Feature::Temperature => TEMPERATURE_RANGE,
        Feature::Humidity => HUMIDITY_RANGE,
        Feature::Pressure => PRESSURE_RANGE,
    }
}

fn quantize(x: f64, step: f64) -> f64 {
    if step > 0.0 {
        let q = (x / step).round() * step;
        // strip representation noise such as 25.370000000000001
        format!("{q:.*}", decimals(step)).parse().unwrap_or(q)
    } else {
        x
    }
}

fn decimals(step: f64) -> usize {
    let mut d = 0;
    let mut s = step;
    while d < 12 && (s - s.round()).abs() > 1e-9 {
        s *= 10.0;
        d += 1;
    }
    d
}

/// Diurnal sine + linear trend + shared AR(1) noise + per-sensor bias and
/// noise. Every cell is observed.
pub fn gen_weather(cfg: &SimConfig) -> Result<MeshDataset> {
    cfg.validate()?;
    let n = cfg.n_sensors;
    let hours = cfg.hours();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut bias = vec![[0.0; FEATURES]; n];
    for b in bias.iter_mut() {
        for f in Feature::ALL {
            b[f.index()] = cfg.signal(f).sensor_bias_sd * gauss(&mut rng);
        }
    }

    let innovation_scale = (1.0 - cfg.noise_ar * cfg.noise_ar).sqrt();
    let mut shared = [0.0; FEATURES];
    let mut values = vec![0.0; n * hours * FEATURES];
    for h in 0..hours {
        for f in Feature::ALL {
            let sd = cfg.signal(f).spatial_noise_sd;
            let e = gauss(&mut rng);
            shared[f.index()] = if h == 0 {
                sd * e
            } else {
                cfg.noise_ar * shared[f.index()] + innovation_scale * sd * e
            };
        }
        let hour_of_day = (h % 24) as f64;
        for s in 0..n {
            for f in Feature::ALL {
                let sig = cfg.signal(f);
                let clean = sig.base
                    + sig.diurnal_amplitude * (2.0 * PI * hour_of_day / 24.0 + sig.phase).sin()
                    + sig.trend_per_day * (h as f64 / 24.0);
                let own = sig.sensor_noise_sd * gauss(&mut rng);
                let (lo, hi) = plausible_range(f);
                let v = (clean + shared[f.index()] + bias[s][f.index()] + own).clamp(lo, hi);
                values[(s * hours + h) * FEATURES + f.index()] = quantize(v, cfg.resolution);
            }
        }
    }
    MeshDataset::new(cfg.sensor_ids(), cfg.start, hours, values, vec![true; n * hours], None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub magnitude: f64,
    pub duration: usize,
    pub count: usize,
    pub seed: u64,
}

/// Where anomalies may be placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// No window starts before this hour; detectors need history first.
    pub earliest_hour: usize,
    /// Minimum clear hours between two windows on the same sensor.
    pub min_separation: usize,
    pub max_attempts: usize,
}

impl Default for Placement {
    fn default() -> Self {
        Self {
            earliest_hour: 14 * 24,
            min_separation: 48,
            max_attempts: 1000,
        }
    }
}

/// The stock ten-anomaly mix used by the default scenario.
pub fn default_anomaly_specs(seed: u64) -> Vec<AnomalySpec> {
    vec![
        AnomalySpec {
            kind: AnomalyKind::TempSpike,
            magnitude: 8.0,
            duration: 3,
            count: 3,
            seed: seed.wrapping_add(1),
        },
        AnomalySpec {
            kind: AnomalyKind::HumidityExtreme,
            magnitude: 35.0,
            duration: 4,
            count: 3,
            seed: seed.wrapping_add(2),
        },
        AnomalySpec {
            kind: AnomalyKind::PressureRamp,
            magnitude: 12.0,
            duration: 8,
            count: 2,
            seed: seed.wrapping_add(3),
        },
        AnomalySpec {
            kind: AnomalyKind::StuckSensor,
            magnitude: 0.0,
            duration: 6,
            count: 2,
            seed: seed.wrapping_add(4),
        },
    ]
}

pub fn inject_anomalies(d: &MeshDataset, specs: &[AnomalySpec]) -> Result<(MeshDataset, Vec<AnomalyLabel>)> {
    inject_anomalies_with(d, specs, &Placement::default())
}

/// Applies each spec `count` times at non-overlapping windows drawn by
/// rejection sampling. Returned labels cover exactly the modified cells.
pub fn inject_anomalies_with(
    d: &MeshDataset,
    specs: &[AnomalySpec],
    placement: &Placement,
) -> Result<(MeshDataset, Vec<AnomalyLabel>)> {
    let hours = d.hours();
    let n = d.n_sensors();
    let mut values = d.values().to_vec();
    // (sensor, first hour, last hour)
    let mut taken: Vec<(usize, usize, usize)> = Vec::new();
    let mut labels = Vec::new();

    for spec in specs {
        if spec.duration < 1 {
            return Err(Error::InvalidConfig(format!("{} duration must be >= 1", spec.kind)));
        }
        if !(spec.magnitude.is_finite() && spec.magnitude >= 0.0) {
            return Err(Error::InvalidConfig(format!("{} magnitude must be finite and >= 0", spec.kind)));
        }
        if spec.count == 0 {
            continue;
        }
        if placement.earliest_hour + spec.duration > hours {
            return Err(Error::Placement(format!(
                "{}-hour {} window does not fit after hour {}",
                spec.duration, spec.kind, placement.earliest_hour
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for _ in 0..spec.count {
            let mut placed = None;
            for _ in 0..placement.max_attempts {
                let sensor = rng.random_range(0..n);
                let start = rng.random_range(placement.earliest_hour..=hours - spec.duration);
                let end = start + spec.duration - 1;
                let clear = taken.iter().all(|&(s, a, b)| {
                    s != sensor || end + placement.min_separation < a || b + placement.min_separation < start
                });
                let observed = (start..=end).all(|h| d.observed(sensor, h));
                if clear && observed {
                    placed = Some((sensor, start, end));
                    break;
                }
            }
            let (sensor, start, end) = placed.ok_or_else(|| {
                Error::Placement(format!(
                    "no free {}-hour window for {} after {} attempts",
                    spec.duration, spec.kind, placement.max_attempts
                ))
            })?;
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            apply_anomaly(&mut values, hours, sensor, start, end, spec, sign);
            taken.push((sensor, start, end));
            labels.push(AnomalyLabel::new(
                d.sensor_ids()[sensor].clone(),
                d.timestamp(start),
                d.timestamp(end),
                spec.kind,
            )?);
        }
    }
    labels.sort_by(|a, b| a.start.cmp(&b.start).then_with(|| a.sensor_id.cmp(&b.sensor_id)));
    let out = d.with_values(values, d.norm().cloned())?;
    Ok((out, labels))
}

fn apply_anomaly(values: &mut [f64], hours: usize, sensor: usize, start: usize, end: usize, spec: &AnomalySpec, sign: f64) {
    let at = |h: usize, f: Feature| (sensor * hours + h) * FEATURES + f.index();
    let frozen: [f64; FEATURES] = std::array::from_fn(|f| values[(sensor * hours + start) * FEATURES + f]);
    for (i, h) in (start..=end).enumerate() {
        match spec.kind {
            AnomalyKind::TempSpike => values[at(h, Feature::Temperature)] += sign * spec.magnitude,
            AnomalyKind::HumidityExtreme => {
                let v = &mut values[at(h, Feature::Humidity)];
                *v = (*v + spec.magnitude).min(HUMIDITY_RANGE.1);
            }
            AnomalyKind::PressureRamp => {
                let frac = (i + 1) as f64 / spec.duration as f64;
                values[at(h, Feature::Pressure)] += sign * spec.magnitude * frac;
            }
            AnomalyKind::StuckSensor => {
                for f in Feature::ALL {
                    values[at(h, f)] = frozen[f.index()];
                }
            }
        }
    }
}

/// A labeled synthetic dataset plus the clean version it was derived from.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub clean: MeshDataset,
    pub data: MeshDataset,
    pub labels: Vec<AnomalyLabel>,
}

pub fn build_scenario(cfg: &SimConfig, specs: &[AnomalySpec], placement: &Placement) -> Result<Scenario> {
    let clean = gen_weather(cfg)?;
    let (data, labels) = inject_anomalies_with(&clean, specs, placement)?;
    Ok(Scenario { clean, data, labels })
}

pub const LABELS_HEADER: &str = "sensor_id,start,end,kind";

pub fn write_labels_csv(labels: &[AnomalyLabel]) -> String {
    let mut s = String::from(LABELS_HEADER);
    s.push('\n');
    for l in labels {
        s.push_str(&format!(
            "{},{},{},{}\n",
            l.sensor_id,
            format_timestamp(&l.start),
            format_timestamp(&l.end),
            l.kind
        ));
    }
    s
}

pub fn parse_labels_csv(text: &str) -> Result<Vec<AnomalyLabel>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if i == 0 {
            if line.trim() != LABELS_HEADER {
                return Err(Error::Malformed {
                    row: 1,
                    column: "header".into(),
                    message: format!("expected `{LABELS_HEADER}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |column: &str, message: String| Error::Malformed {
            row: line_no,
            column: column.into(),
            message,
        };
        if cols.len() != 4 {
            return Err(bad("*", format!("expected 4 columns, found {}", cols.len())));
        }
        let start = parse_timestamp(cols[1]).ok_or_else(|| bad("start", format!("bad timestamp {:?}", cols[1])))?;
        let end = parse_timestamp(cols[2]).ok_or_else(|| bad("end", format!("bad timestamp {:?}", cols[2])))?;
        let kind = cols[3].parse().map_err(|_| bad("kind", format!("unknown kind {:?}", cols[3])))?;
        out.push(AnomalyLabel::new(cols[0], start, end, kind)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendReport {
    pub sent: usize,
    pub acked: usize,
    pub nacked: usize,
}

/// Streams every observed cell to a gateway in timestamp order, one record
/// per line, waiting for each ack. `speedup = f64::INFINITY` sends as fast
/// as acks arrive; otherwise consecutive hours are `3600 / speedup` seconds
/// apart.
pub fn replay(d: &MeshDataset, endpoint: impl ToSocketAddrs, speedup: f64) -> Result<SendReport> {
    if !(speedup > 0.0) {
        return Err(Error::InvalidConfig("speedup must be > 0".into()));
    }
    let stream = TcpStream::connect(endpoint).map_err(|e| Error::Replay { sent: 0, source: e })?;
    stream.set_nodelay(true).ok();
    let mut reader = BufReader::new(stream.try_clone().map_err(|e| Error::Replay { sent: 0, source: e })?);
    let mut writer = stream;
    let mut report = SendReport::default();
    let delay = if speedup.is_finite() {
        Some(StdDuration::from_secs_f64(3600.0 / speedup))
    } else {
        None
    };
    let mut line = String::new();
    for h in 0..d.hours() {
        if h > 0 {
            if let Some(delay) = delay {
                std::thread::sleep(delay);
            }
        }
        for s in 0..d.n_sensors() {
            let Some(r) = d.reading(s, h) else { continue };
            let mut payload = serde_json::to_string(&WireRecord::from(&r))?;
            payload.push('\n');
            let fail = |sent, source| Error::Replay { sent, source };
            writer.write_all(payload.as_bytes()).map_err(|e| fail(report.sent, e))?;
            report.sent += 1;
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| fail(report.sent, e))?;
            if n == 0 {
                return Err(fail(
                    report.sent,
                    std::io::Error::new(std::io::ErrorKind::ConnectionReset, "gateway closed the connection"),
                ));
            }
            let ack: Ack = serde_json::from_str(line.trim_end())
                .map_err(|e| Error::Protocol(format!("bad ack {:?}: {e}", line.trim_end())))?;
            if ack.ok {
                report.acked += 1;
            } else {
                report.nacked += 1;
            }
        }
    }
    Ok(report)
}
