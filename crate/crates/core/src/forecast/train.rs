use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{net_backward, net_forward, net_init, Gradients, RecurrentNetConfig, RecurrentNetState};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ingest::{make_windows, slot_order, write_row, WindowedExample};
use crate::model::{Feature, MeshDataset, FEATURES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub target_sensor: String,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stopped_at: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Target sensor drawn for each epoch, in order.
    pub target_schedule: Vec<String>,
    pub train_windows: usize,
    pub val_windows: usize,
}

/// Hour at which the held-out tail starts.
pub fn validation_split(hours: usize, fraction: f64) -> usize {
    hours - ((hours as f64) * fraction).round() as usize
}

/// Splits every sensor's windows by whether the target hour falls before
/// `split`. Returns per-sensor training windows and the pooled tail.
fn split_windows(
    d: &MeshDataset,
    cfg: &RecurrentNetConfig,
    split: usize,
) -> Result<(Vec<Vec<WindowedExample>>, Vec<WindowedExample>)> {
    let mut train = Vec::with_capacity(d.n_sensors());
    let mut val = Vec::new();
    for s in 0..d.n_sensors() {
        let (before, after): (Vec<_>, Vec<_>) = make_windows(d, s, cfg.window, cfg.horizon)?
            .into_iter()
            .partition(|w| w.anchor + cfg.horizon < split);
        if before.is_empty() {
            return Err(Error::Insufficient(format!(
                "sensor {} has no training window",
                d.sensor_ids()[s]
            )));
        }
        train.push(before);
        val.extend(after);
    }
    if val.is_empty() {
        return Err(Error::Insufficient("no validation window in the held-out tail".into()));
    }
    Ok((train, val))
}

fn mse_of(state: &RecurrentNetState, windows: &[WindowedExample], exec: Exec) -> Result<f64> {
    let errs = exec.map(windows, |w| net_forward(state, &w.inputs).map(|(p, _)| (p - w.target) * (p - w.target)));
    let mut sum = 0.0;
    for e in errs {
        sum += e?;
    }
    Ok(sum / windows.len() as f64)
}

/// Minibatch SGD with one randomly drawn target sensor per epoch and early
/// stopping on the mean squared error over every sensor's held-out tail
/// windows. Returns the parameters of the best epoch.
pub fn train(cfg: &RecurrentNetConfig, d: &MeshDataset, exec: Exec) -> Result<(RecurrentNetState, TrainReport)> {
    cfg.validate()?;
    if cfg.input_width != d.n_sensors() * FEATURES {
        return Err(Error::Shape {
            expected: format!("input_width {}", d.n_sensors() * FEATURES),
            actual: cfg.input_width.to_string(),
        });
    }
    let split = validation_split(d.hours(), cfg.validation_fraction);
    let (train_sets, val) = split_windows(d, cfg, split)?;
    let mut state = net_init(cfg)?;
    let mut rotation = ChaCha8Rng::seed_from_u64(cfg.rotation_seed);
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let n_params = state.params().len();

    let mut best = state.clone();
    let mut best_val = mse_of(&state, &val, exec)?;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut schedule = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let target = rotation.random_range(0..d.n_sensors());
        schedule.push(d.sensor_ids()[target].clone());
        let windows = &train_sets[target];
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut shuffle);

        let mut sq_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_example = exec.map(batch, |&i| -> Result<(f64, Gradients)> {
                let w = &windows[i];
                let (pred, cache) = net_forward(&state, &w.inputs)?;
                Ok((pred - w.target, net_backward(&state, &cache, w.target)?))
            });
            let mut total = Gradients::zeros(n_params);
            for item in per_example {
                let (resid, g) = item?;
                sq_sum += resid * resid;
                total.add_assign(&g);
            }
            total.scale(1.0 / batch.len() as f64);
            if total.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            state.sgd_step(&total, cfg.learning_rate)?;
        }
        let train_mse = sq_sum / windows.len() as f64;
        let val_mse = mse_of(&state, &val, exec)?;
        if !train_mse.is_finite() || !val_mse.is_finite() || state.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        epochs.push(EpochRecord {
            epoch,
            target_sensor: d.sensor_ids()[target].clone(),
            train_mse,
            val_mse,
        });
        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best = state.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let report = TrainReport {
        stopped_at: epochs.len(),
        epochs,
        best_epoch,
        best_val_mse: best_val,
        target_schedule: schedule,
        train_windows: train_sets.iter().map(Vec::len).sum(),
        val_windows: val.len(),
    };
    Ok((best, report))
}

/// A model that maps one input window (target-first slot order, flattened
/// row-major) to the next target temperature.
pub trait OneStepModel {
    fn window(&self) -> usize;
    fn horizon(&self) -> usize;
    fn predict(&self, inputs: &[f64]) -> Result<f64>;
}

impl OneStepModel for RecurrentNetState {
    fn window(&self) -> usize {
        self.config().window
    }

    fn horizon(&self) -> usize {
        self.config().horizon
    }

    fn predict(&self, inputs: &[f64]) -> Result<f64> {
        net_forward(self, inputs).map(|(p, _)| p)
    }
}

pub const ROLLOUT_HOURS: usize = 24;

/// Iterated one-step forecast of the target temperature for the 24 hours
/// after `anchor`. Predictions replace the target's temperature in later
/// input rows; every other value is taken from the dataset.
pub fn rollout_24h<M: OneStepModel + ?Sized>(
    model: &M,
    d: &MeshDataset,
    target: usize,
    anchor: usize,
) -> Result<Vec<f64>> {
    if model.horizon() != 1 {
        return Err(Error::InvalidConfig("rollout needs a one-step model".into()));
    }
    if target >= d.n_sensors() {
        return Err(Error::UnknownSensor(format!("index {target}")));
    }
    let window = model.window();
    if anchor + 1 < window || anchor + ROLLOUT_HOURS > d.hours() {
        return Err(Error::Insufficient(format!(
            "anchor {anchor} needs {window} prior hours and {ROLLOUT_HOURS} following hours"
        )));
    }
    let first = anchor + 1 - window;
    let last_input = anchor + ROLLOUT_HOURS - 1;
    if let Some(h) = (first..=last_input).find(|&h| !d.hour_complete(h)) {
        return Err(Error::Insufficient(format!("hour {h} is not fully observed")));
    }
    let width = d.n_sensors() * FEATURES;
    let order = slot_order(d.n_sensors(), target);
    let rows = window + ROLLOUT_HOURS - 1;
    let mut buf = vec![0.0; rows * width];
    for (i, hour) in (first..=last_input).enumerate() {
        write_row(d, &order, hour, &mut buf[i * width..(i + 1) * width]);
    }
    let mut out = Vec::with_capacity(ROLLOUT_HOURS);
    for k in 0..ROLLOUT_HOURS {
        let pred = model.predict(&buf[k * width..(k + window) * width])?;
        out.push(pred);
        if k + 1 < ROLLOUT_HOURS {
            // row window+k holds hour anchor+k+1; slot 0 feature 0 is the target temperature
            buf[(window + k) * width + Feature::Temperature.index()] = pred;
        }
    }
    Ok(out)
}

/// One-step predictions and truths for every sensor's windows whose target
/// hour lies in `[from, to)`, ordered by sensor then hour.
pub fn one_step_predictions<M: OneStepModel + Sync + ?Sized>(
    model: &M,
    d: &MeshDataset,
    from: usize,
    to: usize,
    exec: Exec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (window, horizon) = (model.window(), model.horizon());
    let mut windows = Vec::new();
    for s in 0..d.n_sensors() {
        windows.extend(
            make_windows(d, s, window, horizon)?
                .into_iter()
                .filter(|w| (from..to).contains(&(w.anchor + horizon))),
        );
    }
    let preds = exec.map(&windows, |w| model.predict(&w.inputs));
    let mut p = Vec::with_capacity(windows.len());
    for x in preds {
        p.push(x?);
    }
    Ok((p, windows.iter().map(|w| w.target).collect()))
}

/// Same-hour-yesterday temperature for each of the `h` hours after
/// `anchor`, falling back to the value at `anchor` when yesterday's cell is
/// missing.
pub fn persistence_forecast(d: &MeshDataset, target: usize, anchor: usize, h: usize) -> Result<Vec<f64>> {
    if target >= d.n_sensors() {
        return Err(Error::UnknownSensor(format!("index {target}")));
    }
    if anchor >= d.hours() || !d.observed(target, anchor) {
        return Err(Error::Insufficient(format!("anchor hour {anchor} is not observed")));
    }
    let last = d.value(target, anchor, Feature::Temperature);
    Ok((1..=h)
        .map(|k| match (anchor + k).checked_sub(24) {
            Some(y) if y < d.hours() && d.observed(target, y) => d.value(target, y, Feature::Temperature),
            _ => last,
        })
        .collect())
}

/// Persistence one-step predictions over the same windows as
/// [`one_step_predictions`] with the given window length.
pub fn persistence_predictions(d: &MeshDataset, window: usize, from: usize, to: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut p = Vec::new();
    let mut t = Vec::new();
    for s in 0..d.n_sensors() {
        for w in make_windows(d, s, window, 1)? {
            if (from..to).contains(&(w.anchor + 1)) {
                p.push(persistence_forecast(d, s, w.anchor, 1)?[0]);
                t.push(w.target);
            }
        }
    }
    Ok((p, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::net::CellKind;
    use crate::model::hour_to_timestamp;

    fn dataset(n: usize, hours: usize, f: impl Fn(usize, usize, usize) -> f64) -> MeshDataset {
        let mut values = Vec::with_capacity(n * hours * FEATURES);
        for s in 0..n {
            for h in 0..hours {
                for k in 0..FEATURES {
                    values.push(f(s, h, k));
                }
            }
        }
        MeshDataset::new(
            (1..=n).map(|i| format!("s{i}")).collect(),
            hour_to_timestamp(473_352),
            hours,
            values,
            vec![true; n * hours],
            None,
        )
        .unwrap()
    }

    fn small_cfg(n: usize) -> RecurrentNetConfig {
        RecurrentNetConfig {
            hidden: vec![4],
            window: 6,
            max_epochs: 5,
            ..RecurrentNetConfig::new(n * FEATURES, CellKind::Lstm)
        }
    }

    #[test]
    fn constant_target_is_fit_within_five_epochs() {
        let d = dataset(2, 2000, |_, _, _| 0.5);
        let (state, report) = train(&small_cfg(2), &d, Exec::Sequential).unwrap();
        assert!(report.stopped_at <= 5);
        assert!(report.best_val_mse < 1e-6, "{}", report.best_val_mse);
        let (p, _) = net_forward(&state, &vec![0.5; 6 * 6]).unwrap();
        assert!((p - 0.5).abs() < 1e-3);
    }

    #[test]
    fn training_is_deterministic_across_exec_modes() {
        let d = dataset(3, 150, |s, h, k| 0.5 + 0.3 * ((h as f64) / 4.0 + s as f64).sin() * (k as f64 + 1.0) / 3.0);
        let cfg = RecurrentNetConfig { max_epochs: 3, ..small_cfg(3) };
        let a = train(&cfg, &d, Exec::Sequential).unwrap();
        let b = train(&cfg, &d, Exec::Parallel).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0.params(), b.0.params());
        assert_eq!(a.1.target_schedule.len(), 3);
    }

    #[test]
    fn best_so_far_validation_is_non_increasing() {
        let d = dataset(2, 300, |s, h, _| 0.5 + 0.4 * ((h as f64) * std::f64::consts::TAU / 24.0 + s as f64).sin());
        let cfg = RecurrentNetConfig {
            max_epochs: 8,
            patience: 3,
            ..small_cfg(2)
        };
        let (_, report) = train(&cfg, &d, Exec::Sequential).unwrap();
        let mut best = f64::INFINITY;
        let mut trace = Vec::new();
        for e in &report.epochs {
            best = best.min(e.val_mse);
            trace.push(best);
        }
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(report.best_val_mse, trace.last().copied().unwrap().min(report.best_val_mse));
        assert!(report.epochs.iter().all(|e| e.train_mse >= 0.0 && e.val_mse >= 0.0));
    }

    #[test]
    fn width_mismatch_and_missing_windows_are_errors() {
        let d = dataset(2, 200, |_, _, _| 0.5);
        assert!(matches!(train(&small_cfg(3), &d, Exec::Sequential), Err(Error::Shape { .. })));
        let short = dataset(2, 8, |_, _, _| 0.5);
        assert!(matches!(train(&small_cfg(2), &short, Exec::Sequential), Err(Error::Insufficient(_))));
    }

    #[test]
    fn divergence_names_the_epoch() {
        let d = dataset(2, 200, |s, h, _| 0.5 + 0.4 * ((h + s) as f64).sin());
        let cfg = RecurrentNetConfig {
            learning_rate: 1e300,
            ..small_cfg(2)
        };
        assert!(matches!(train(&cfg, &d, Exec::Sequential), Err(Error::Diverged { epoch: 1 })));
    }

    /// Exact next-value model for a noiseless diurnal sine plus linear
    /// trend: such a series satisfies the recurrence with characteristic
    /// polynomial (z−1)²(z²−2cos(ω)z+1).
    struct Recurrence {
        window: usize,
        width: usize,
    }

    impl OneStepModel for Recurrence {
        fn window(&self) -> usize {
            self.window
        }

        fn horizon(&self) -> usize {
            1
        }

        fn predict(&self, inputs: &[f64]) -> Result<f64> {
            let c = (std::f64::consts::TAU / 24.0).cos();
            let x = |back: usize| inputs[(self.window - 1 - back) * self.width];
            Ok((2.0 * c + 2.0) * x(0) - (2.0 + 4.0 * c) * x(1) + (2.0 + 2.0 * c) * x(2) - x(3))
        }
    }

    #[test]
    fn perfect_model_rolls_out_the_noiseless_signal() {
        let cfg = crate::simulate::SimConfig {
            n_days: 10,
            noise_ar: 0.0,
            resolution: 0.0,
            ..Default::default()
        };
        let mut cfg = cfg;
        for f in [&mut cfg.temperature, &mut cfg.humidity, &mut cfg.pressure] {
            f.spatial_noise_sd = 0.0;
            f.sensor_noise_sd = 0.0;
        }
        let raw = crate::simulate::gen_weather(&cfg).unwrap();
        let d = crate::ingest::apply_normalizer(&raw, &crate::ingest::fit_normalizer(&raw).unwrap()).unwrap();
        let model = Recurrence { window: 24, width: d.n_sensors() * FEATURES };
        for target in 0..d.n_sensors() {
            let anchor = 100;
            let preds = rollout_24h(&model, &d, target, anchor).unwrap();
            assert_eq!(preds.len(), ROLLOUT_HOURS);
            for (k, p) in preds.iter().enumerate() {
                let truth = d.value(target, anchor + 1 + k, Feature::Temperature);
                assert!((p - truth).abs() < 1e-6, "target {target} step {k}: {p} vs {truth}");
            }
        }
    }

    struct Offset;

    impl OneStepModel for Offset {
        fn window(&self) -> usize {
            2
        }

        fn horizon(&self) -> usize {
            1
        }

        fn predict(&self, inputs: &[f64]) -> Result<f64> {
            Ok(inputs[inputs.len() / 2] + 0.01)
        }
    }

    #[test]
    fn rollout_feeds_predictions_back() {
        let d = dataset(2, 60, |s, h, _| (s * 1000 + h) as f64);
        let preds = rollout_24h(&Offset, &d, 1, 10).unwrap();
        // each step adds 0.01 to the fed-back previous prediction
        let want: Vec<f64> = (1..=24).map(|k| 1010.0 + 0.01 * k as f64).collect();
        for (p, w) in preds.iter().zip(&want) {
            assert!((p - w).abs() < 1e-9);
        }
        assert!(matches!(rollout_24h(&Offset, &d, 0, 0), Err(Error::Insufficient(_))));
        assert!(matches!(rollout_24h(&Offset, &d, 0, 40), Err(Error::Insufficient(_))));
    }

    #[test]
    fn persistence_examples() {
        let periodic = dataset(1, 96, |_, h, _| ((h % 24) as f64).sin());
        let p = persistence_forecast(&periodic, 0, 50, 24).unwrap();
        for (k, v) in p.iter().enumerate() {
            assert_eq!(*v, periodic.value(0, 51 + k, Feature::Temperature));
        }
        let constant = dataset(1, 30, |_, _, _| 3.0);
        assert!(persistence_forecast(&constant, 0, 25, 5).unwrap().iter().all(|v| *v == 3.0));
        // no yesterday before hour 24: carry the anchor value
        let ramp = dataset(1, 30, |_, h, _| h as f64);
        assert_eq!(persistence_forecast(&ramp, 0, 5, 1).unwrap(), vec![5.0]);
    }
}
