//! Scoring and the experiment runners behind the CLI.

pub mod config;
pub mod metrics;
pub mod report;

pub use config::{AnomalyPreset, NetSettings, RunConfig, CONFIG_ENV};
pub use metrics::{detection_metrics, f1_score, regression_metrics, DetectionMetrics, FalseAlert, LabelHit, RegressionMetrics};
pub use report::{load_data, run_table1, run_table2, LoadedData, Table1Report, Table1Timing, Table2Latency, Table2Report};
