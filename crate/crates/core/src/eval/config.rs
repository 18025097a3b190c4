//! Flat `key = value` run configuration shared by the CLI and the report
//! runners. Lines starting with `#` are comments; unknown keys are errors.
//! Any key not present keeps its default, so an empty file and the word
//! `default` describe the same run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::forecast::{CellKind, RecurrentNetConfig};
use crate::htm::DetectorConfig;
use crate::model::FEATURES;
use crate::simulate::SimConfig;

/// Environment variable consulted when no `--config` is given.
pub const CONFIG_ENV: &str = "MESHCAST_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyPreset {
    /// The ten-anomaly mix used by the default scenario.
    Default,
    None,
}

/// Training settings for the recurrent models; input width is filled in
/// from the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSettings {
    pub hidden: Vec<usize>,
    pub window: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub rotation_seed: u64,
}

impl Default for NetSettings {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            window: 24,
            learning_rate: 0.3,
            batch_size: 8,
            max_epochs: 100,
            patience: 25,
            validation_fraction: 0.2,
            seed: 7,
            rotation_seed: 11,
        }
    }
}

impl NetSettings {
    pub fn net_config(&self, n_sensors: usize, cell: CellKind) -> RecurrentNetConfig {
        RecurrentNetConfig {
            hidden: self.hidden.clone(),
            window: self.window,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            validation_fraction: self.validation_fraction,
            seed: self.seed,
            rotation_seed: self.rotation_seed,
            ..RecurrentNetConfig::new(n_sensors * FEATURES, cell)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub anomalies: AnomalyPreset,
    /// Readings CSV used instead of a simulation.
    pub data_csv: Option<PathBuf>,
    pub data_labels: Option<PathBuf>,
    pub max_gap: usize,
    /// Fraction of hours held out at the end as the forecast test block.
    pub test_fraction: f64,
    pub net: NetSettings,
    pub arima_order: [usize; 3],
    /// Hours of history handed to each ARIMA one-step forecast.
    pub arima_history: usize,
    pub detector: DetectorConfig,
    pub tolerance_h: i64,
    /// Extra thresholds evaluated from the recorded likelihood traces.
    pub sweep: Vec<f64>,
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            anomalies: AnomalyPreset::Default,
            data_csv: None,
            data_labels: None,
            max_gap: 6,
            test_fraction: 0.2,
            net: NetSettings::default(),
            arima_order: [2, 1, 1],
            arima_history: 168,
            detector: DetectorConfig::default(),
            tolerance_h: 2,
            sweep: Vec::new(),
            exec: Exec::default(),
        }
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::InvalidConfig(format!("bad value {value:?} for {key}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

const ENCODER_KEYS: [&str; FEATURES] = ["htm.encoder.temperature", "htm.encoder.humidity", "htm.encoder.pressure"];

impl RunConfig {
    /// Resolves `--config`: `None` falls back to [`CONFIG_ENV`], and the
    /// literal `default` (or neither being set) yields the defaults.
    pub fn resolve(arg: Option<&str>) -> Result<Self> {
        let env = std::env::var(CONFIG_ENV).ok();
        match arg.or(env.as_deref()) {
            None | Some("default") => Ok(Self::default()),
            Some(path) => Self::load(Path::new(path)),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "sim.sensors" => self.sim.n_sensors = num(key, value)?,
            "sim.days" => self.sim.n_days = num(key, value)?,
            "sim.seed" => self.sim.seed = num(key, value)?,
            "sim.noise_ar" => self.sim.noise_ar = num(key, value)?,
            "sim.resolution" => self.sim.resolution = num(key, value)?,
            "sim.anomalies" => {
                self.anomalies = match value {
                    "default" => AnomalyPreset::Default,
                    "none" => AnomalyPreset::None,
                    _ => return Err(bad(key, value)),
                }
            }
            "data.csv" => self.data_csv = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.labels" => self.data_labels = (!value.is_empty()).then(|| PathBuf::from(value)),
            "ingest.max_gap" => self.max_gap = num(key, value)?,
            "forecast.hidden" => self.net.hidden = list(key, value)?,
            "forecast.window" => self.net.window = num(key, value)?,
            "forecast.learning_rate" => self.net.learning_rate = num(key, value)?,
            "forecast.batch_size" => self.net.batch_size = num(key, value)?,
            "forecast.max_epochs" => self.net.max_epochs = num(key, value)?,
            "forecast.patience" => self.net.patience = num(key, value)?,
            "forecast.validation_fraction" => self.net.validation_fraction = num(key, value)?,
            "forecast.seed" => self.net.seed = num(key, value)?,
            "forecast.rotation_seed" => self.net.rotation_seed = num(key, value)?,
            "forecast.test_fraction" => self.test_fraction = num(key, value)?,
            "arima.order" => {
                let v: Vec<usize> = list(key, value)?;
                self.arima_order = v.try_into().map_err(|_| bad(key, value))?;
            }
            "arima.history" => self.arima_history = num(key, value)?,
            "htm.threshold" => self.detector.threshold = num(key, value)?,
            "htm.cooldown_hours" => self.detector.cooldown_hours = num(key, value)?,
            "htm.sigma_floor" => self.detector.likelihood.sigma_floor = num(key, value)?,
            "htm.long_window" => self.detector.likelihood.long_window = num(key, value)?,
            "htm.short_window" => self.detector.likelihood.short_window = num(key, value)?,
            "eval.tolerance_h" => self.tolerance_h = num(key, value)?,
            "eval.sweep" => self.sweep = list(key, value)?,
            "exec" => {
                self.exec = match value {
                    "sequential" => Exec::Sequential,
                    "parallel" => Exec::Parallel,
                    _ => return Err(bad(key, value)),
                }
            }
            _ => {
                let Some(f) = ENCODER_KEYS.iter().position(|k| *k == key) else {
                    return Err(Error::InvalidConfig(format!("unknown key {key}")));
                };
                let v: Vec<f64> = list(key, value)?;
                let [min, max] = v[..] else { return Err(bad(key, value)) };
                let enc = &mut self.detector.encoder.features[f];
                enc.min = min;
                enc.max = max;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.detector.validate()?;
        self.net.net_config(self.sim.n_sensors, CellKind::Lstm).validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidConfig("forecast.test_fraction must lie in (0, 1)".into()));
        }
        if self.tolerance_h < 0 {
            return Err(Error::InvalidConfig("eval.tolerance_h must be >= 0".into()));
        }
        if self.data_labels.is_some() && self.data_csv.is_none() {
            return Err(Error::InvalidConfig("data.labels needs data.csv".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`RunConfig::parse`]
    /// reads back.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("write to string");
        put("sim.sensors", self.sim.n_sensors.to_string());
        put("sim.days", self.sim.n_days.to_string());
        put("sim.seed", self.sim.seed.to_string());
        put("sim.noise_ar", self.sim.noise_ar.to_string());
        put("sim.resolution", self.sim.resolution.to_string());
        put(
            "sim.anomalies",
            match self.anomalies {
                AnomalyPreset::Default => "default",
                AnomalyPreset::None => "none",
            }
            .into(),
        );
        put("data.csv", path(&self.data_csv));
        put("data.labels", path(&self.data_labels));
        put("ingest.max_gap", self.max_gap.to_string());
        put("forecast.hidden", join(&self.net.hidden));
        put("forecast.window", self.net.window.to_string());
        put("forecast.learning_rate", self.net.learning_rate.to_string());
        put("forecast.batch_size", self.net.batch_size.to_string());
        put("forecast.max_epochs", self.net.max_epochs.to_string());
        put("forecast.patience", self.net.patience.to_string());
        put("forecast.validation_fraction", self.net.validation_fraction.to_string());
        put("forecast.seed", self.net.seed.to_string());
        put("forecast.rotation_seed", self.net.rotation_seed.to_string());
        put("forecast.test_fraction", self.test_fraction.to_string());
        put("arima.order", join(&self.arima_order));
        put("arima.history", self.arima_history.to_string());
        put("htm.threshold", self.detector.threshold.to_string());
        put("htm.cooldown_hours", self.detector.cooldown_hours.to_string());
        put("htm.sigma_floor", self.detector.likelihood.sigma_floor.to_string());
        put("htm.long_window", self.detector.likelihood.long_window.to_string());
        put("htm.short_window", self.detector.likelihood.short_window.to_string());
        for (k, enc) in ENCODER_KEYS.iter().zip(&self.detector.encoder.features) {
            put(k, format!("{},{}", enc.min, enc.max));
        }
        put("eval.tolerance_h", self.tolerance_h.to_string());
        put("eval.sweep", join(&self.sweep));
        put(
            "exec",
            match self.exec {
                Exec::Sequential => "sequential",
                Exec::Parallel => "parallel",
            }
            .into(),
        );
        out
    }
}
