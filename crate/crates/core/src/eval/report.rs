//! The two experiment runners: forecast comparison and detection scoring.
//!
//! Reports hold only seed-determined values so that their JSON is
//! byte-identical across runs; wall-clock measurements go into separate
//! timing structs.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{AnomalyPreset, RunConfig};
use super::metrics::{detection_metrics, regression_metrics, DetectionMetrics, RegressionMetrics};
use crate::error::{Error, Result};
use crate::forecast::{arima_fit, arima_forecast, persistence_forecast, train, validation_split, ArimaModel, CellKind, OneStepModel, TrainReport};
use crate::htm::{detect_stream_traced, DetectionRun};
use crate::ingest::{align_mesh, apply_normalizer, dedup_dataset, fill_gaps, fit_normalizer, make_windows, parse_csv, WindowedExample};
use crate::model::{hour_index, AlertEvent, AnomalyLabel, Feature, MeshDataset, NormalizationParams};
use crate::simulate::{build_scenario, default_anomaly_specs, parse_labels_csv, Placement, GENERATOR};

pub fn generator() -> String {
    format!("meshcast {}", env!("CARGO_PKG_VERSION"))
}

/// Hours per month used when expressing alert rates.
const MONTH_HOURS: f64 = 30.0 * 24.0;

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub data: MeshDataset,
    pub labels: Vec<AnomalyLabel>,
    pub source: String,
}

/// Reads `data.csv` (and `data.labels`) when set, otherwise simulates the
/// configured scenario.
pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    if let Some(path) = &cfg.data_csv {
        let parsed = parse_csv(&std::fs::read_to_string(path)?)?;
        if let Some(r) = parsed.rejected.first() {
            return Err(Error::Implausible {
                row: r.line,
                fields: r.violations.iter().map(|v| v.field().to_string()).collect(),
            });
        }
        let labels = match &cfg.data_labels {
            Some(p) => parse_labels_csv(&std::fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        return Ok(LoadedData {
            data: align_mesh(&parsed.readings)?,
            labels,
            source: format!("csv {}", path.display()),
        });
    }
    let specs = match cfg.anomalies {
        AnomalyPreset::Default => default_anomaly_specs(cfg.sim.seed),
        AnomalyPreset::None => Vec::new(),
    };
    let scenario = build_scenario(&cfg.sim, &specs, &Placement::default())?;
    Ok(LoadedData {
        data: scenario.data,
        labels: scenario.labels,
        source: format!(
            "simulated: {} sensors, {} days, seed {}",
            cfg.sim.n_sensors, cfg.sim.n_days, cfg.sim.seed
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// MAE mapped back to degrees Celsius.
    pub mae_celsius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub model: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub train_windows: usize,
    pub val_windows: usize,
}

impl TrainingSummary {
    fn new(model: &str, r: &TrainReport) -> Self {
        Self {
            model: model.into(),
            epochs_run: r.stopped_at,
            best_epoch: r.best_epoch,
            best_val_mse: r.best_val_mse,
            train_windows: r.train_windows,
            val_windows: r.val_windows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Report {
    pub generator: String,
    /// Pseudo-random generator behind every seeded draw.
    pub rng: String,
    pub config: Vec<String>,
    pub source: String,
    pub sensors: usize,
    pub hours: usize,
    pub duplicates_removed: Vec<usize>,
    /// First hour of the test block.
    pub test_start_hour: usize,
    pub test_windows: usize,
    pub normalization: NormalizationParams,
    pub rows: Vec<ModelRow>,
    /// Model names, best first, by MAE then RMSE then name.
    pub ranking: Vec<String>,
    pub training: Vec<TrainingSummary>,
    /// Smallest and largest normalized prediction over all models.
    pub prediction_range: [f64; 2],
}

impl Table1Report {
    pub fn row(&self, model: &str) -> Option<&ModelRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTiming {
    pub model: String,
    pub train_seconds: f64,
    pub inference_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Timing {
    pub generator: String,
    pub models: Vec<ModelTiming>,
}

fn row(model: &str, m: RegressionMetrics, norm: &NormalizationParams) -> ModelRow {
    let r = norm.ranges[Feature::Temperature.index()];
    ModelRow {
        model: model.into(),
        mae: m.mae,
        mse: m.mse,
        rmse: m.rmse,
        mae_celsius: m.mae * (r.max - r.min),
    }
}

/// The longest fully observed run of `sensor`'s temperature in `[0, end)`.
fn longest_run(d: &MeshDataset, sensor: usize, end: usize) -> Vec<f64> {
    let (mut best, mut cur) = (0..0, 0);
    for h in 0..=end {
        if h < end && d.observed(sensor, h) {
            continue;
        }
        if h - cur > best.len() {
            best = cur..h;
        }
        cur = h + 1;
    }
    best.map(|h| d.value(sensor, h, Feature::Temperature)).collect()
}

/// Up to `len` observed temperatures of `sensor` ending at `anchor`.
fn recent_history(d: &MeshDataset, sensor: usize, anchor: usize, len: usize) -> Vec<f64> {
    let mut from = anchor;
    while from > 0 && anchor - from + 1 < len && d.observed(sensor, from - 1) {
        from -= 1;
    }
    (from..=anchor).map(|h| d.value(sensor, h, Feature::Temperature)).collect()
}

fn predict_all<M: OneStepModel + Sync>(model: &M, windows: &[WindowedExample], cfg: &RunConfig) -> Result<Vec<f64>> {
    cfg.exec.map(windows, |w| model.predict(&w.inputs)).into_iter().collect()
}

/// Trains the LSTM and GRU, fits ARIMA per sensor and scores them with the
/// persistence baseline on identical one-step windows of the held-out tail.
/// Data are deduplicated, short gaps filled, and min-max scaled with
/// parameters fitted on the training hours only.
pub fn run_table1(cfg: &RunConfig) -> Result<(Table1Report, Table1Timing)> {
    cfg.validate()?;
    let loaded = load_data(cfg)?;
    let (deduped, removed) = dedup_dataset(&loaded.data)?;
    let filled = fill_gaps(&deduped, cfg.max_gap);
    let split = validation_split(filled.hours(), cfg.test_fraction);
    let train_part = filled.slice_hours(0, split)?;
    let norm = fit_normalizer(&train_part)?;
    let data = apply_normalizer(&filled, &norm)?;
    let train_data = apply_normalizer(&train_part, &norm)?;

    let window = cfg.net.window;
    let mut windows = Vec::new();
    for s in 0..data.n_sensors() {
        windows.extend(make_windows(&data, s, window, 1)?.into_iter().filter(|w| w.anchor + 1 >= split));
    }
    if windows.is_empty() {
        return Err(Error::Insufficient("no complete window in the test block".into()));
    }
    let truth: Vec<f64> = windows.iter().map(|w| w.target).collect();

    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut training = Vec::new();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut score = |name: &str, pred: Vec<f64>, train_s: f64, infer_s: f64| -> Result<()> {
        for p in &pred {
            lo = lo.min(*p);
            hi = hi.max(*p);
        }
        rows.push(row(name, regression_metrics(&pred, &truth)?, &norm));
        timings.push(ModelTiming {
            model: name.into(),
            train_seconds: train_s,
            inference_seconds: infer_s,
        });
        Ok(())
    };

    for cell in [CellKind::Lstm, CellKind::Gru] {
        let net_cfg = cfg.net.net_config(data.n_sensors(), cell);
        let t0 = Instant::now();
        let (state, report) = train(&net_cfg, &train_data, cfg.exec)?;
        let train_s = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let pred = predict_all(&state, &windows, cfg)?;
        score(cell.as_str(), pred, train_s, t1.elapsed().as_secs_f64())?;
        training.push(TrainingSummary::new(cell.as_str(), &report));
    }

    let [p, d, q] = cfg.arima_order;
    let t0 = Instant::now();
    let models: Vec<ArimaModel> = cfg
        .exec
        .map_range(data.n_sensors(), |s| arima_fit(&longest_run(&data, s, split), p, d, q))
        .into_iter()
        .collect::<Result<_>>()?;
    let train_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let pred: Vec<f64> = cfg
        .exec
        .map(&windows, |w| {
            let s = w.target_sensor_index;
            let history = recent_history(&data, s, w.anchor, cfg.arima_history);
            arima_forecast(&models[s], &history, 1).map(|f| f[0])
        })
        .into_iter()
        .collect::<Result<_>>()?;
    score("arima", pred, train_s, t1.elapsed().as_secs_f64())?;

    let t1 = Instant::now();
    let pred: Vec<f64> = windows
        .iter()
        .map(|w| persistence_forecast(&data, w.target_sensor_index, w.anchor, 1).map(|f| f[0]))
        .collect::<Result<_>>()?;
    score("persistence", pred, 0.0, t1.elapsed().as_secs_f64())?;

    let mut ranked: Vec<&ModelRow> = rows.iter().collect();
    ranked.sort_by(|a, b| a.mae.total_cmp(&b.mae).then(a.rmse.total_cmp(&b.rmse)).then(a.model.cmp(&b.model)));
    let ranking = ranked.iter().map(|r| r.model.clone()).collect();

    let report = Table1Report {
        generator: generator(),
        rng: GENERATOR.to_string(),
        config: cfg.to_text().lines().map(str::to_string).collect(),
        source: loaded.source,
        sensors: data.n_sensors(),
        hours: data.hours(),
        duplicates_removed: removed,
        test_start_hour: split,
        test_windows: windows.len(),
        normalization: norm,
        rows,
        ranking,
        training,
        prediction_range: [lo, hi],
    };
    let timing = Table1Timing {
        generator: generator(),
        models: timings,
    };
    Ok((report, timing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub alerts: usize,
    pub tp: usize,
    pub fp: usize,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

/// A fixed external operating point printed beside our own for comparison;
/// never used as a pass threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
    pub f1: f64,
}

pub const REFERENCE_POINT: ReferencePoint = ReferencePoint {
    tpr: 0.92,
    fpr: 0.05,
    precision: 0.89,
    f1: 0.90,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Report {
    pub generator: String,
    /// Pseudo-random generator behind every seeded draw.
    pub rng: String,
    pub config: Vec<String>,
    pub source: String,
    pub sensors: usize,
    pub hours: usize,
    pub labels: usize,
    pub threshold: f64,
    pub alerts: usize,
    pub metrics: DetectionMetrics,
    /// Hours per sensor before the likelihood leaves its warm-up.
    pub warmup_hours: usize,
    /// Unmatched alerts after warm-up, over the whole mesh, per 30 days.
    pub false_alerts_per_30_days: Option<f64>,
    pub sweep: Vec<SweepRow>,
    pub reference: ReferencePoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Latency {
    pub generator: String,
    pub readings: usize,
    pub total_seconds: f64,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

fn latency_stats(run: &DetectionRun) -> Table2Latency {
    let mut all: Vec<f64> = run.latencies.iter().flatten().map(|s| s * 1e6).collect();
    all.sort_by(f64::total_cmp);
    let pick = |q: f64| {
        if all.is_empty() {
            0.0
        } else {
            all[((all.len() - 1) as f64 * q).round() as usize]
        }
    };
    let total: f64 = all.iter().sum();
    Table2Latency {
        generator: generator(),
        readings: all.len(),
        total_seconds: total / 1e6,
        mean_us: if all.is_empty() { 0.0 } else { total / all.len() as f64 },
        p50_us: pick(0.5),
        p99_us: pick(0.99),
        max_us: all.last().copied().unwrap_or(0.0),
    }
}

/// Alerts the detector would have raised at `threshold`, replayed from the
/// recorded likelihoods with the same cooldown rule.
pub fn alerts_at_threshold(d: &MeshDataset, run: &DetectionRun, threshold: f64, cooldown_hours: i64) -> Vec<AlertEvent> {
    let mut out = Vec::new();
    for (s, trace) in run.traces.iter().enumerate() {
        let mut last: Option<i64> = None;
        for t in trace {
            let ts = d.timestamp(t.hour);
            let hour = hour_index(&ts);
            if t.likelihood >= threshold && !last.is_some_and(|l| hour - l < cooldown_hours) {
                last = Some(hour);
                out.push(AlertEvent {
                    timestamp: ts,
                    sensor_id: d.sensor_ids()[s].clone(),
                    raw_score: t.raw,
                    likelihood: t.likelihood,
                    message: String::new(),
                });
            }
        }
    }
    out
}

/// Streams the raw readings of every sensor through its own detector and
/// scores the alerts against the labels with windowed matching.
pub fn run_table2(cfg: &RunConfig) -> Result<(Table2Report, Table2Latency)> {
    cfg.validate()?;
    let loaded = load_data(cfg)?;
    let d = &loaded.data;
    let run = detect_stream_traced(d, &cfg.detector, cfg.exec)?;
    let first_hour = hour_index(&d.start());
    let score = |alerts: &[AlertEvent]| {
        detection_metrics(alerts, &loaded.labels, d.sensor_ids(), first_hour, d.hours(), cfg.tolerance_h)
    };
    let metrics = score(&run.alerts)?;

    let warmup = cfg.detector.likelihood.long_window;
    let after = d.hours().saturating_sub(warmup);
    let late_false = metrics
        .false_alerts
        .iter()
        .filter(|a| crate::ingest::parse_timestamp(&a.timestamp).is_some_and(|t| hour_index(&t) >= first_hour + warmup as i64))
        .count();
    let per_30 = (after > 0).then(|| late_false as f64 / (after as f64 / MONTH_HOURS));

    let mut sweep = Vec::with_capacity(cfg.sweep.len());
    for &threshold in &cfg.sweep {
        let alerts = alerts_at_threshold(d, &run, threshold, cfg.detector.cooldown_hours);
        let m = score(&alerts)?;
        sweep.push(SweepRow {
            threshold,
            alerts: alerts.len(),
            tp: m.tp,
            fp: m.fp,
            tpr: m.tpr,
            fpr: m.fpr,
            precision: m.precision,
            f1: m.f1,
        });
    }

    let report = Table2Report {
        generator: generator(),
        rng: GENERATOR.to_string(),
        config: cfg.to_text().lines().map(str::to_string).collect(),
        source: loaded.source.clone(),
        sensors: d.n_sensors(),
        hours: d.hours(),
        labels: loaded.labels.len(),
        threshold: cfg.detector.threshold,
        alerts: run.alerts.len(),
        metrics,
        warmup_hours: warmup,
        false_alerts_per_30_days: per_30,
        sweep,
        reference: REFERENCE_POINT,
    };
    Ok((report, latency_stats(&run)))
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.digits$}"))
}

pub fn render_table1(r: &Table1Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} ({} sensors, {} hours, test from hour {})", r.source, r.sensors, r.hours, r.test_start_hour);
    let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8} {:>9}", "model", "MAE", "MSE", "RMSE", "MAE(°C)");
    for m in &r.rows {
        let _ = writeln!(out, "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>9.3}", m.model, m.mae, m.mse, m.rmse, m.mae_celsius);
    }
    let _ = writeln!(out, "ranking by MAE: {}", r.ranking.join(" < "));
    for t in &r.training {
        let _ = writeln!(
            out,
            "{}: best epoch {} of {}, validation MSE {:.6}",
            t.model, t.best_epoch, t.epochs_run, t.best_val_mse
        );
    }
    out
}

pub fn render_table2(r: &Table2Report) -> String {
    let m = &r.metrics;
    let mut out = String::new();
    let _ = writeln!(out, "{} ({} sensors, {} hours, {} labels)", r.source, r.sensors, r.hours, r.labels);
    let _ = writeln!(out, "{:<10} {:>6} {:>8} {:>9} {:>6}", "", "TPR", "FPR", "Precision", "F1");
    let _ = writeln!(
        out,
        "{:<10} {:>6} {:>8} {:>9} {:>6}",
        "htm",
        opt(m.tpr, 2),
        opt(m.fpr, 4),
        opt(m.precision, 2),
        opt(m.f1, 2)
    );
    let p = &r.reference;
    let _ = writeln!(
        out,
        "{:<10} {:>6.2} {:>8.2} {:>9.2} {:>6.2}",
        "reference", p.tpr, p.fpr, p.precision, p.f1
    );
    let _ = writeln!(
        out,
        "alerts {} (tp {}, fp {}, fn {}), false alerts per 30 days after warm-up: {}",
        r.alerts,
        m.tp,
        m.fp,
        m.fn_,
        opt(r.false_alerts_per_30_days, 2)
    );
    for h in &m.hits {
        let hit = h.first_alert_offset_h.map_or_else(|| "missed".into(), |o| format!("alert at +{o} h"));
        let _ = writeln!(out, "  {} {} {}..{}: {}", h.sensor_id, h.kind, h.start, h.end, hit);
    }
    for s in &r.sweep {
        let _ = writeln!(
            out,
            "threshold {}: alerts {}, tpr {}, precision {}, f1 {}",
            s.threshold,
            s.alerts,
            opt(s.tpr, 2),
            opt(s.precision, 2),
            opt(s.f1, 2)
        );
    }
    out
}
