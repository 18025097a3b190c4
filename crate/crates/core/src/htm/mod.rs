//! Hierarchical temporal memory anomaly detection.
//!
//! Readings are encoded as concatenated scalar SDRs, pooled into a fixed
//! number of active columns, and fed to a temporal memory whose share of
//! unpredicted columns is the raw anomaly score. A rolling Gaussian over
//! those scores turns them into a likelihood, and the likelihood is
//! thresholded into alerts.

pub mod detector;
pub mod encoder;
pub mod likelihood;
mod sdr;
pub mod spatial;
pub mod temporal;

pub use detector::{detect_stream, detect_stream_traced, DetectionRun, DetectorConfig, DetectorSnapshot, StreamDetector};
pub use encoder::{encode_reading, encode_scalar, EncoderConfig, ScalarEncoderConfig};
pub use likelihood::{AnomalyLikelihood, LikelihoodConfig};
pub use sdr::Sdr;
pub use spatial::{SpatialPooler, SpatialPoolerConfig};
pub use temporal::{TemporalMemory, TemporalMemoryConfig, TmOutput};
