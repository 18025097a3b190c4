use proptest::prelude::*;

use meshcast::eval::{detection_metrics, regression_metrics, RunConfig};
use meshcast::htm::encoder::encode_values;
use meshcast::htm::{encode_scalar, EncoderConfig, ScalarEncoderConfig, Sdr, SpatialPooler, SpatialPoolerConfig};
use meshcast::ingest::{dedup_filter, fill_gaps};
use meshcast::model::{
    hour_index, hour_to_timestamp, AlertEvent, AnomalyKind, AnomalyLabel, MeshDataset, SensorReading, SensorSeries,
    FEATURES,
};
use meshcast::simulate::{gen_weather, inject_anomalies_with, AnomalySpec, Placement, SimConfig};

const BASE_HOUR: i64 = 473_352;

fn reading(hour: i64, v: f64) -> SensorReading {
    SensorReading {
        sensor_id: "s1".into(),
        timestamp: hour_to_timestamp(hour),
        temperature: v,
        humidity: 50.0,
        pressure: 1000.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn regression_matches_direct_sums(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..200)) {
        let (pred, truth): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = regression_metrics(&pred, &truth).unwrap();
        let n = pred.len() as f64;
        let mae = pred.iter().zip(&truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
        let mse = pred.iter().zip(&truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
        prop_assert!((m.mae - mae).abs() <= 1e-9 * (1.0 + mae));
        prop_assert!((m.mse - mse).abs() <= 1e-9 * (1.0 + mse));
        prop_assert!((m.rmse * m.rmse - m.mse).abs() <= 1e-9 * (1.0 + mse));
        prop_assert!(m.mae <= m.rmse + 1e-12);
    }

    #[test]
    fn detection_ignores_alert_order(
        alerts in prop::collection::vec((0usize..3, 0i64..200, 0.0f64..1.0), 0..40)
            .prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle())),
        starts in prop::collection::btree_set(0i64..190, 0..6),
    ) {
        let sensors: Vec<String> = (1..=3).map(|i| format!("s{i}")).collect();
        let event = |&(s, h, l): &(usize, i64, f64)| AlertEvent {
            timestamp: hour_to_timestamp(BASE_HOUR + h),
            sensor_id: sensors[s].clone(),
            raw_score: l,
            likelihood: l,
            message: String::new(),
        };
        // one label per start, round-robin over sensors, never overlapping on one sensor
        let starts: Vec<i64> = starts.into_iter().collect();
        let mut labels = Vec::new();
        let mut last_end = [i64::MIN; 3];
        for (i, &s) in starts.iter().enumerate() {
            let sensor = i % 3;
            if s <= last_end[sensor] {
                continue;
            }
            last_end[sensor] = s + 4;
            labels.push(
                AnomalyLabel::new(
                    sensors[sensor].clone(),
                    hour_to_timestamp(BASE_HOUR + s),
                    hour_to_timestamp(BASE_HOUR + s + 4),
                    AnomalyKind::TempSpike,
                )
                .unwrap(),
            );
        }
        let (a, b) = alerts;
        let a: Vec<AlertEvent> = a.iter().map(event).collect();
        let b: Vec<AlertEvent> = b.iter().map(event).collect();
        let ma = detection_metrics(&a, &labels, &sensors, BASE_HOUR, 200, 2).unwrap();
        let mb = detection_metrics(&b, &labels, &sensors, BASE_HOUR, 200, 2).unwrap();
        prop_assert_eq!(&ma, &mb);
        prop_assert_eq!(ma.tp + ma.fn_, labels.len());
        prop_assert_eq!(ma.fp, ma.false_alerts.len());
    }

    #[test]
    fn dedup_keeps_two_per_run_and_is_idempotent(steps in prop::collection::vec((1i64..3, 0u8..3), 1..120)) {
        let mut hour = BASE_HOUR;
        let mut readings = Vec::new();
        for &(dt, v) in &steps {
            hour += dt;
            readings.push(reading(hour, f64::from(v)));
        }
        // oracle: lengths of maximal runs of consecutive hours with equal values
        let mut expected = 0usize;
        let mut run = 0usize;
        for (i, r) in readings.iter().enumerate() {
            let continues = i > 0
                && hour_index(&r.timestamp) - hour_index(&readings[i - 1].timestamp) == 1
                && r.temperature == readings[i - 1].temperature;
            if continues {
                run += 1;
            } else {
                expected += run.saturating_sub(2);
                run = 1;
            }
        }
        expected += run.saturating_sub(2);

        let series = SensorSeries::new("s1", readings).unwrap();
        let (once, removed) = dedup_filter(&series);
        prop_assert_eq!(removed, expected);
        prop_assert_eq!(once.len(), series.len() - expected);
        let (twice, again) = dedup_filter(&once);
        prop_assert_eq!(again, 0);
        prop_assert_eq!(twice, once);
    }

    #[test]
    fn scalar_encoder_overlap_tracks_bucket_distance(b1 in 0usize..110, b2 in 0usize..110) {
        let cfg = ScalarEncoderConfig::new(15.0, 40.0);
        let w = cfg.active_width;
        let span = (cfg.n_buckets - w) as f64;
        let value = |b: usize| cfg.min + (b as f64 + 0.5) / span * (cfg.max - cfg.min);
        let (x, y) = (encode_scalar(&cfg, value(b1)).unwrap(), encode_scalar(&cfg, value(b2)).unwrap());
        prop_assert_eq!(x.len(), w);
        prop_assert_eq!(x.overlap(&y), w.saturating_sub(b1.abs_diff(b2)));
    }

    #[test]
    fn reading_encoding_has_three_blocks(t in -50.0f64..80.0, h in 0.0f64..100.0, p in 900.0f64..1100.0) {
        let cfg = EncoderConfig::default();
        let sdr = encode_values(&cfg, &[t, h, p]).unwrap();
        let w: usize = cfg.features.iter().map(|f| f.active_width).sum();
        prop_assert_eq!(sdr.len(), w);
        prop_assert_eq!(sdr.width(), cfg.width());
    }

    #[test]
    fn fill_gaps_keeps_observed_cells(
        mask in prop::collection::vec(prop::bool::weighted(0.6), 2 * 60),
        max_gap in 0usize..8,
    ) {
        let hours = 60;
        let values: Vec<f64> = (0..2 * hours * FEATURES).map(|i| (i as f64 * 0.37).sin() * 10.0).collect();
        let d = MeshDataset::new(
            vec!["a".into(), "b".into()],
            hour_to_timestamp(BASE_HOUR),
            hours,
            values,
            mask.clone(),
            None,
        )
        .unwrap();
        let f = fill_gaps(&d, max_gap);
        for (cell, &observed) in mask.iter().enumerate() {
            if observed {
                prop_assert!(f.mask()[cell]);
                for k in 0..FEATURES {
                    prop_assert_eq!(f.values()[cell * FEATURES + k].to_bits(), d.values()[cell * FEATURES + k].to_bits());
                }
            }
        }
        // a filled cell lies inside an interior gap no longer than max_gap
        for s in 0..2 {
            let row = &mask[s * hours..(s + 1) * hours];
            for h in 0..hours {
                if row[h] || !f.mask()[s * hours + h] {
                    continue;
                }
                let left = (0..h).rev().find(|&i| row[i]);
                let right = (h + 1..hours).find(|&i| row[i]);
                prop_assert!(matches!((left, right), (Some(l), Some(r)) if r - l - 1 <= max_gap));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn spatial_pooler_activates_exactly_k(
        seed in any::<u64>(),
        inputs in prop::collection::vec(prop::collection::btree_set(0u32..300, 0..60), 1..6),
    ) {
        let cfg = SpatialPoolerConfig { n_columns: 256, active_columns: 12, seed, ..SpatialPoolerConfig::default() };
        let mut sp = SpatialPooler::new(cfg, 300).unwrap();
        for (i, bits) in inputs.into_iter().enumerate() {
            let sdr = Sdr::new(300, bits.into_iter().collect()).unwrap();
            let out = sp.compute(&sdr, i % 2 == 0).unwrap();
            prop_assert_eq!(out.len(), 12);
            prop_assert_eq!(out.width(), 256);
        }
    }

    #[test]
    fn injection_touches_only_labelled_cells(
        seed in any::<u64>(),
        kind in prop::sample::select(vec![
            AnomalyKind::TempSpike,
            AnomalyKind::HumidityExtreme,
            AnomalyKind::PressureRamp,
            AnomalyKind::StuckSensor,
        ]),
        duration in 1usize..8,
        count in 1usize..4,
    ) {
        let d = gen_weather(&SimConfig { n_sensors: 3, n_days: 6, seed, ..SimConfig::default() }).unwrap();
        let spec = AnomalySpec { kind, magnitude: 5.0, duration, count, seed };
        let placement = Placement { earliest_hour: 24, min_separation: 4, max_attempts: 1000 };
        let (out, labels) = inject_anomalies_with(&d, &[spec], &placement).unwrap();
        prop_assert_eq!(labels.len(), count);
        prop_assert_eq!(out.mask(), d.mask());
        for s in 0..d.n_sensors() {
            for h in 0..d.hours() {
                let ts = d.timestamp(h);
                let inside = labels
                    .iter()
                    .any(|l| l.sensor_id == d.sensor_ids()[s] && l.start <= ts && ts <= l.end);
                if !inside {
                    let a = d.triple(s, h).map(f64::to_bits);
                    let b = out.triple(s, h).map(f64::to_bits);
                    prop_assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn config_text_round_trips(
        sensors in 2usize..20,
        days in 2usize..200,
        seed in any::<u64>(),
        noise_ar in 0.0f64..0.99,
        lr in 1e-4f64..1.0,
        hidden in prop::collection::vec(1usize..64, 1..3),
        threshold in 0.5f64..0.99999,
        sweep in prop::collection::vec(0.5f64..1.0, 0..4),
        range in (-20.0f64..20.0, 1.0f64..50.0),
    ) {
        let mut cfg = RunConfig::default();
        cfg.sim.n_sensors = sensors;
        cfg.sim.n_days = days;
        cfg.sim.seed = seed;
        cfg.sim.noise_ar = noise_ar;
        cfg.net.learning_rate = lr;
        cfg.net.hidden = hidden;
        cfg.detector.threshold = threshold;
        cfg.sweep = sweep;
        cfg.detector.encoder.features[0].min = range.0;
        cfg.detector.encoder.features[0].max = range.0 + range.1;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
