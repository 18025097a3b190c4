use serde::{Deserialize, Serialize};

use super::Sdr;
use crate::error::{Error, Result};
use crate::model::{SensorReading, FEATURES};

/// Bucketed scalar encoder: a contiguous block of `active_width` bits whose
/// offset tracks the value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarEncoderConfig {
    pub min: f64,
    pub max: f64,
    pub n_buckets: usize,
    pub active_width: usize,
}

impl ScalarEncoderConfig {
    pub fn new(min: f64, max: f64) -> Self {
        Self {
            min,
            max,
            n_buckets: 130,
            active_width: 21,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.active_width.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("active width {} must be odd", self.active_width)));
        }
        if self.n_buckets < self.active_width {
            return Err(Error::InvalidConfig(format!(
                "n_buckets {} smaller than active width {}",
                self.n_buckets, self.active_width
            )));
        }
        if !(self.max > self.min) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::InvalidConfig(format!("encoder range [{}, {}]", self.min, self.max)));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.n_buckets
    }

    /// First active bit for `value`, after clamping into range.
    pub fn bucket(&self, value: f64) -> usize {
        let v = value.clamp(self.min, self.max);
        let span = (self.n_buckets - self.active_width) as f64;
        (((v - self.min) / (self.max - self.min)) * span).floor() as usize
    }
}

pub fn encode_scalar(cfg: &ScalarEncoderConfig, value: f64) -> Result<Sdr> {
    if !value.is_finite() {
        return Err(Error::InvalidDataset(format!("cannot encode non-finite value {value}")));
    }
    let b = cfg.bucket(value) as u32;
    Sdr::new(cfg.width(), (b..b + cfg.active_width as u32).collect())
}

/// One scalar encoder per feature, concatenated in feature order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub features: Vec<ScalarEncoderConfig>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            features: vec![
                ScalarEncoderConfig::new(15.0, 40.0),
                ScalarEncoderConfig::new(20.0, 100.0),
                ScalarEncoderConfig::new(985.0, 1035.0),
            ],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features.len() != FEATURES {
            return Err(Error::InvalidConfig(format!(
                "encoder needs {FEATURES} feature configs, found {}",
                self.features.len()
            )));
        }
        self.features.iter().try_for_each(ScalarEncoderConfig::validate)
    }

    pub fn width(&self) -> usize {
        self.features.iter().map(ScalarEncoderConfig::width).sum()
    }
}

pub fn encode_values(cfg: &EncoderConfig, values: &[f64; FEATURES]) -> Result<Sdr> {
    cfg.validate()?;
    let parts = cfg
        .features
        .iter()
        .zip(values)
        .map(|(c, &v)| encode_scalar(c, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sdr::concat(&parts))
}

pub fn encode_reading(cfg: &EncoderConfig, reading: &SensorReading) -> Result<Sdr> {
    encode_values(cfg, &reading.values())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp() -> ScalarEncoderConfig {
        ScalarEncoderConfig::new(0.0, 109.0)
    }

    #[test]
    fn edges() {
        let c = temp();
        assert_eq!(encode_scalar(&c, 0.0).unwrap().active(), (0..21).collect::<Vec<u32>>().as_slice());
        assert_eq!(encode_scalar(&c, 109.0).unwrap().active(), (109..130).collect::<Vec<u32>>().as_slice());
        // clamped
        assert_eq!(encode_scalar(&c, 1e6).unwrap(), encode_scalar(&c, 109.0).unwrap());
        assert!(encode_scalar(&c, f64::NAN).is_err());
    }

    #[test]
    fn adjacent_buckets_share_all_but_one_bit() {
        // with span 109 over 109 positions each unit is exactly one bucket
        let c = temp();
        for v in 0..108 {
            let a = encode_scalar(&c, v as f64).unwrap();
            let b = encode_scalar(&c, v as f64 + 1.0).unwrap();
            assert_eq!(c.bucket(v as f64 + 1.0), c.bucket(v as f64) + 1);
            assert_eq!(a.overlap(&b), c.active_width - 1);
        }
    }

    #[test]
    fn reading_segments_are_disjoint() {
        let cfg = EncoderConfig::default();
        let a = encode_values(&cfg, &[25.0, 60.0, 1005.0]).unwrap();
        assert_eq!(a.len(), 63);
        assert_eq!(a, encode_values(&cfg, &[25.0, 60.0, 1005.0]).unwrap());
        let b = encode_values(&cfg, &[25.0, 80.0, 1005.0]).unwrap();
        let w = cfg.features[0].width() as u32;
        let changed: Vec<u32> = a
            .active()
            .iter()
            .filter(|x| !b.contains(**x))
            .chain(b.active().iter().filter(|x| !a.contains(**x)))
            .copied()
            .collect();
        assert!(!changed.is_empty());
        assert!(changed.iter().all(|&bit| bit >= w && bit < 2 * w));
    }

    #[test]
    fn config_validation() {
        let mut c = temp();
        c.active_width = 20;
        assert!(c.validate().is_err());
        let mut c = temp();
        c.n_buckets = 10;
        assert!(c.validate().is_err());
        assert!(ScalarEncoderConfig::new(1.0, 1.0).validate().is_err());
    }
}
