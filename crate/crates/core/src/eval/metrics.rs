use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{hour_index, AlertEvent, AnomalyLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
}

pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<RegressionMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            expected: format!("{} predictions", truth.len()),
            actual: pred.len().to_string(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Insufficient("no predictions to score".into()));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::InvalidDataset("non-finite prediction or truth".into()));
    }
    let n = pred.len() as f64;
    let (abs, sq) = pred.iter().zip(truth).fold((0.0, 0.0), |(a, s), (p, t)| {
        let e = p - t;
        (a + e.abs(), s + e * e)
    });
    let mse = sq / n;
    Ok(RegressionMetrics {
        mae: abs / n,
        mse,
        rmse: mse.sqrt(),
    })
}

/// Harmonic mean of precision and recall; `None` when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> Option<f64> {
    let denom = precision + recall;
    (denom > 0.0).then(|| 2.0 * precision * recall / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelHit {
    pub sensor_id: String,
    pub start: String,
    pub end: String,
    pub kind: String,
    /// Hours from the tolerance-expanded window start (`start - tolerance`)
    /// to the matched alert.
    pub first_alert_offset_h: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalseAlert {
    pub sensor_id: String,
    pub timestamp: String,
}

/// Rates are `None` when undefined (zero denominator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn_hours: usize,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub hits: Vec<LabelHit>,
    /// Unmatched alerts in time order.
    pub false_alerts: Vec<FalseAlert>,
}

#[derive(Debug, Clone, Copy)]
struct Window {
    label: usize,
    from: i64,
    to: i64,
}

/// Windowed matching of point alerts to labelled anomalies.
///
/// A label's window is `[start − tol, end + tol]` in hours. Alerts are taken
/// in time order and each claims the earliest-ending unmatched window of its
/// sensor that contains it; alerts that claim nothing are false positives.
/// TN hours count, per sensor, the hours in `[first_hour, first_hour +
/// total_hours)` outside every expanded window that carry no alert.
pub fn detection_metrics(
    alerts: &[AlertEvent],
    labels: &[AnomalyLabel],
    sensors: &[String],
    first_hour: i64,
    total_hours: usize,
    tolerance_h: i64,
) -> Result<DetectionMetrics> {
    if tolerance_h < 0 {
        return Err(Error::InvalidConfig("tolerance must be >= 0".into()));
    }
    let mut windows: BTreeMap<&str, Vec<Window>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        windows.entry(l.sensor_id.as_str()).or_default().push(Window {
            label: i,
            from: hour_index(&l.start) - tolerance_h,
            to: hour_index(&l.end) + tolerance_h,
        });
    }
    for (sensor, ws) in windows.iter_mut() {
        ws.sort_by_key(|w| (w.from, w.to, w.label));
        for pair in ws.windows(2) {
            let (a, b) = (&labels[pair[0].label], &labels[pair[1].label]);
            if hour_index(&b.start) <= hour_index(&a.end) {
                return Err(Error::OverlappingLabels(sensor.to_string()));
            }
        }
    }

    let mut sorted: Vec<&AlertEvent> = alerts.iter().collect();
    sorted.sort_by(|a, b| {
        (hour_index(&a.timestamp), &a.sensor_id)
            .cmp(&(hour_index(&b.timestamp), &b.sensor_id))
            .then(a.likelihood.total_cmp(&b.likelihood))
            .then(a.raw_score.total_cmp(&b.raw_score))
    });
    let mut first_hit: Vec<Option<i64>> = vec![None; labels.len()];
    let mut matched_alerts = 0;
    let mut false_alerts = Vec::new();
    for a in &sorted {
        let h = hour_index(&a.timestamp);
        let claim = windows.get(a.sensor_id.as_str()).and_then(|ws| {
            ws.iter()
                .filter(|w| first_hit[w.label].is_none() && (w.from..=w.to).contains(&h))
                .min_by_key(|w| (w.to, w.label))
                .copied()
        });
        match claim {
            Some(w) => {
                first_hit[w.label] = Some(h - w.from);
                matched_alerts += 1;
            }
            None => false_alerts.push(FalseAlert {
                sensor_id: a.sensor_id.clone(),
                timestamp: crate::ingest::format_timestamp(&a.timestamp),
            }),
        }
    }

    let mut tn_hours = 0;
    let end_hour = first_hour + total_hours as i64;
    for s in sensors {
        let ws = windows.get(s.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let mut alerted: Vec<i64> = alerts.iter().filter(|a| &a.sensor_id == s).map(|a| hour_index(&a.timestamp)).collect();
        alerted.sort_unstable();
        alerted.dedup();
        for h in first_hour..end_hour {
            if ws.iter().any(|w| (w.from..=w.to).contains(&h)) || alerted.binary_search(&h).is_ok() {
                continue;
            }
            tn_hours += 1;
        }
    }

    let fp = false_alerts.len();
    let tp = first_hit.iter().filter(|h| h.is_some()).count();
    let fn_ = labels.len() - tp;
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let tpr = ratio(tp, tp + fn_);
    let fpr = ratio(fp, fp + tn_hours);
    let precision = ratio(matched_alerts, matched_alerts + fp);
    let f1 = match (precision, tpr) {
        (Some(p), Some(r)) => f1_score(p, r),
        _ => None,
    };
    let hits = labels
        .iter()
        .zip(&first_hit)
        .map(|(l, h)| LabelHit {
            sensor_id: l.sensor_id.clone(),
            start: crate::ingest::format_timestamp(&l.start),
            end: crate::ingest::format_timestamp(&l.end),
            kind: l.kind.to_string(),
            first_alert_offset_h: *h,
        })
        .collect();
    Ok(DetectionMetrics {
        tp,
        fp,
        fn_,
        tn_hours,
        tpr,
        fpr,
        precision,
        f1,
        hits,
        false_alerts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{hour_to_timestamp, AnomalyKind};

    const H0: i64 = 473_352;

    fn label(sensor: &str, start: i64, end: i64) -> AnomalyLabel {
        AnomalyLabel::new(sensor, hour_to_timestamp(H0 + start), hour_to_timestamp(H0 + end), AnomalyKind::TempSpike).unwrap()
    }

    fn alert(sensor: &str, hour: i64) -> AlertEvent {
        AlertEvent {
            timestamp: hour_to_timestamp(H0 + hour),
            sensor_id: sensor.into(),
            raw_score: 1.0,
            likelihood: 1.0,
            message: String::new(),
        }
    }

    fn ids() -> Vec<String> {
        vec!["s1".into(), "s2".into()]
    }

    #[test]
    fn regression_examples() {
        let m = regression_metrics(&[0.0, 0.0], &[1.0, 3.0]).unwrap();
        assert_eq!((m.mae, m.mse), (2.0, 5.0));
        assert_eq!(m.rmse, 5f64.sqrt());
        let z = regression_metrics(&[1.5, 2.0], &[1.5, 2.0]).unwrap();
        assert_eq!((z.mae, z.mse, z.rmse), (0.0, 0.0, 0.0));
        assert!(regression_metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(regression_metrics(&[], &[]).is_err());
    }

    #[test]
    fn rmse_identity_on_table_one_row() {
        // an unrounded mse near 0.001673 prints as 0.0017 with rmse 0.0409
        let rmse = 0.001673f64.sqrt();
        assert_eq!(format!("{:.4}", rmse), "0.0409");
        assert_eq!(format!("{:.4}", 0.001673), "0.0017");
    }

    #[test]
    fn f1_of_the_reported_operating_point() {
        let f1 = f1_score(0.89, 0.92).unwrap();
        assert!((f1 - 2.0 * 0.89 * 0.92 / 1.81).abs() < 1e-15);
        assert_eq!(format!("{f1:.2}"), "0.90");
        assert_eq!(f1_score(0.0, 0.0), None);
    }

    #[test]
    fn perfect_detection() {
        let labels = [label("s1", 10, 12), label("s2", 30, 33)];
        let alerts = [alert("s1", 11), alert("s2", 30)];
        let m = detection_metrics(&alerts, &labels, &ids(), H0, 100, 2).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
        assert_eq!((m.tpr, m.fpr, m.precision, m.f1), (Some(1.0), Some(0.0), Some(1.0), Some(1.0)));
        // s1: 100 − 7 window hours, s2: 100 − 8
        assert_eq!(m.tn_hours, 93 + 92);
        assert_eq!(m.hits[0].first_alert_offset_h, Some(3));
    }

    #[test]
    fn three_labels_two_hits_one_spurious() {
        let labels = [label("s1", 10, 12), label("s1", 40, 41), label("s2", 70, 75)];
        let alerts = [alert("s1", 14), alert("s2", 68), alert("s1", 60)];
        let m = detection_metrics(&alerts, &labels, &ids(), H0, 100, 2).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (2, 1, 1));
        assert!((m.tpr.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.precision.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn one_alert_matches_at_most_one_label() {
        // adjacent windows overlap after expansion
        let labels = [label("s1", 10, 11), label("s1", 14, 15)];
        let m = detection_metrics(&[alert("s1", 13)], &labels, &ids(), H0, 50, 2).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 1));
        // the earlier-ending window is claimed
        assert_eq!(m.hits[0].first_alert_offset_h, Some(5));
    }

    #[test]
    fn repeated_alerts_in_a_window_are_false_positives() {
        let labels = [label("s1", 10, 20)];
        let m = detection_metrics(&[alert("s1", 11), alert("s1", 15)], &labels, &ids(), H0, 50, 2).unwrap();
        assert_eq!((m.tp, m.fp), (1, 1));
        assert_eq!(m.precision, Some(0.5));
    }

    #[test]
    fn no_labels_gives_undefined_recall() {
        let m = detection_metrics(&[alert("s1", 5)], &[], &ids(), H0, 24, 2).unwrap();
        assert_eq!((m.tpr, m.f1), (None, None));
        assert_eq!(m.fpr, Some(1.0 / 48.0));
    }

    #[test]
    fn overlapping_labels_rejected() {
        let labels = [label("s1", 10, 15), label("s1", 15, 18)];
        assert!(matches!(
            detection_metrics(&[], &labels, &ids(), H0, 50, 2),
            Err(Error::OverlappingLabels(_))
        ));
    }
}
