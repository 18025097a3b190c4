use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Default floor on the standard deviation of the score history. A single
/// unpredicted column after a long run of exact zeros stays below the
/// default alert threshold; a floor much higher masks short anomalies.
pub const SIGMA_FLOOR: f64 = 0.003;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodConfig {
    pub long_window: usize,
    pub short_window: usize,
    pub sigma_floor: f64,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        Self {
            long_window: 200,
            short_window: 10,
            sigma_floor: SIGMA_FLOOR,
        }
    }
}

impl LikelihoodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.long_window < 2 || self.short_window < 2 {
            return Err(Error::InvalidConfig("likelihood windows must be >= 2".into()));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return Err(Error::InvalidConfig("sigma_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Rolling Gaussian model of raw anomaly scores. The likelihood of a step
/// is the normal CDF of the short-term mean score under the mean and
/// standard deviation of the preceding `long_window` scores; it stays at
/// 0.5 until that window has filled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyLikelihood {
    cfg: LikelihoodConfig,
    long: VecDeque<f64>,
    short: VecDeque<f64>,
}

impl AnomalyLikelihood {
    pub fn new(cfg: LikelihoodConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            long: VecDeque::with_capacity(cfg.long_window + 1),
            short: VecDeque::with_capacity(cfg.short_window + 1),
            cfg,
        })
    }

    pub fn warmed_up(&self) -> bool {
        self.long.len() >= self.cfg.long_window
    }

    /// Mean and floored standard deviation of the long window.
    pub fn moments(&self) -> (f64, f64) {
        let n = self.long.len().max(1) as f64;
        let mean = self.long.iter().sum::<f64>() / n;
        let var = self.long.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt().max(self.cfg.sigma_floor))
    }

    pub fn update(&mut self, raw: f64) -> f64 {
        self.short.push_back(raw);
        if self.short.len() > self.cfg.short_window {
            self.short.pop_front();
        }
        let likelihood = if self.warmed_up() {
            let (mean, sd) = self.moments();
            let recent = self.short.iter().sum::<f64>() / self.short.len() as f64;
            normal_cdf((recent - mean) / sd)
        } else {
            0.5
        };
        self.long.push_back(raw);
        if self.long.len() > self.cfg.long_window {
            self.long.pop_front();
        }
        likelihood
    }
}
