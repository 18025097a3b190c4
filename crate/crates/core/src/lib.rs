//! Hyperlocal weather from a small sensor mesh: simulation, ingestion,
//! a TCP gateway, recurrent and ARIMA temperature forecasting, and
//! per-sensor HTM anomaly detection.

// `!(x > y)` is how validation rejects NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// index loops mirror the math in the numeric kernels
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod eval;
pub mod exec;
pub mod forecast;
pub mod gateway;
pub mod htm;
pub mod ingest;
pub mod model;
pub mod simulate;

pub use error::{Error, Result};
pub use exec::Exec;
