use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sdr;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialPoolerConfig {
    pub n_columns: usize,
    /// Fraction of the input each column may connect to.
    pub potential_pct: f64,
    pub connected_threshold: f32,
    pub active_columns: usize,
    pub permanence_inc: f32,
    pub permanence_dec: f32,
    pub seed: u64,
}

impl Default for SpatialPoolerConfig {
    fn default() -> Self {
        Self {
            n_columns: 1024,
            potential_pct: 0.5,
            connected_threshold: 0.5,
            active_columns: 40,
            permanence_inc: 0.05,
            permanence_dec: 0.008,
            seed: 1956,
        }
    }
}

impl SpatialPoolerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_columns == 0 || self.active_columns == 0 || self.active_columns > self.n_columns {
            return Err(Error::InvalidConfig(format!(
                "need 0 < active columns ({}) <= columns ({})",
                self.active_columns, self.n_columns
            )));
        }
        if !(self.potential_pct > 0.0 && self.potential_pct <= 1.0) {
            return Err(Error::InvalidConfig("potential_pct must lie in (0, 1]".into()));
        }
        for p in [self.connected_threshold, self.permanence_inc, self.permanence_dec] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig("permanence parameters must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Global-inhibition spatial pooler without boosting: the `k` columns with
/// the most connected synapses onto active input bits win, ties going to
/// the lower column index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialPooler {
    cfg: SpatialPoolerConfig,
    n_inputs: usize,
    /// Per column: sorted potential input bits.
    potential: Vec<Vec<u32>>,
    /// Per column: permanence of each potential synapse.
    permanence: Vec<Vec<f32>>,
    /// Per input bit: (column, synapse slot) pairs; derived from `potential`.
    #[serde(skip)]
    by_input: Vec<Vec<(u32, u32)>>,
}

impl SpatialPooler {
    pub fn new(cfg: SpatialPoolerConfig, n_inputs: usize) -> Result<Self> {
        cfg.validate()?;
        if n_inputs == 0 {
            return Err(Error::InvalidConfig("spatial pooler needs a non-empty input".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pool = ((n_inputs as f64 * cfg.potential_pct).round() as usize).clamp(1, n_inputs);
        let mut potential = Vec::with_capacity(cfg.n_columns);
        let mut permanence = Vec::with_capacity(cfg.n_columns);
        let lo = (cfg.connected_threshold - 0.1).max(0.0);
        let hi = (cfg.connected_threshold + 0.1).min(1.0);
        for _ in 0..cfg.n_columns {
            let mut bits: Vec<u32> = sample(&mut rng, n_inputs, pool).into_iter().map(|b| b as u32).collect();
            bits.sort_unstable();
            let perms = bits.iter().map(|_| rng.random_range(lo..=hi)).collect();
            potential.push(bits);
            permanence.push(perms);
        }
        Ok(Self::assemble(cfg, n_inputs, potential, permanence))
    }

    /// Builds a pooler from explicit synapses, mainly for small hand-made cases.
    pub fn from_parts(
        cfg: SpatialPoolerConfig,
        n_inputs: usize,
        potential: Vec<Vec<u32>>,
        permanence: Vec<Vec<f32>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if potential.len() != cfg.n_columns || permanence.len() != cfg.n_columns {
            return Err(Error::Shape {
                expected: format!("{} columns", cfg.n_columns),
                actual: potential.len().to_string(),
            });
        }
        for (bits, perms) in potential.iter().zip(&permanence) {
            if bits.len() != perms.len() || bits.iter().any(|&b| b as usize >= n_inputs) {
                return Err(Error::InvalidConfig("inconsistent synapse lists".into()));
            }
            if perms.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidConfig("permanence outside [0, 1]".into()));
            }
        }
        Ok(Self::assemble(cfg, n_inputs, potential, permanence))
    }

    fn assemble(cfg: SpatialPoolerConfig, n_inputs: usize, potential: Vec<Vec<u32>>, permanence: Vec<Vec<f32>>) -> Self {
        let mut sp = Self {
            cfg,
            n_inputs,
            potential,
            permanence,
            by_input: Vec::new(),
        };
        sp.rebuild_index();
        sp
    }

    fn rebuild_index(&mut self) {
        let mut by_input = vec![Vec::new(); self.n_inputs];
        for (c, bits) in self.potential.iter().enumerate() {
            for (slot, &b) in bits.iter().enumerate() {
                by_input[b as usize].push((c as u32, slot as u32));
            }
        }
        self.by_input = by_input;
    }

    /// Restores derived indices after deserialization.
    pub fn restore(&mut self) {
        if self.by_input.len() != self.n_inputs {
            self.rebuild_index();
        }
    }

    pub fn config(&self) -> &SpatialPoolerConfig {
        &self.cfg
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn permanences(&self) -> impl Iterator<Item = f32> + '_ {
        self.permanence.iter().flatten().copied()
    }

    /// Connected synapses onto active input bits, per column.
    pub fn overlaps(&self, input: &Sdr) -> Result<Vec<u32>> {
        if input.width() != self.n_inputs {
            return Err(Error::Shape {
                expected: format!("input width {}", self.n_inputs),
                actual: input.width().to_string(),
            });
        }
        let mut overlaps = vec![0u32; self.cfg.n_columns];
        let threshold = self.cfg.connected_threshold;
        for &bit in input.active() {
            for &(c, slot) in &self.by_input[bit as usize] {
                if self.permanence[c as usize][slot as usize] >= threshold {
                    overlaps[c as usize] += 1;
                }
            }
        }
        Ok(overlaps)
    }

    pub fn compute(&mut self, input: &Sdr, learn: bool) -> Result<Sdr> {
        let overlaps = self.overlaps(input)?;
        let mut order: Vec<u32> = (0..self.cfg.n_columns as u32).collect();
        // stable sort keeps lower indices first among equal overlaps
        order.sort_by(|a, b| overlaps[*b as usize].cmp(&overlaps[*a as usize]));
        order.truncate(self.cfg.active_columns);
        order.sort_unstable();
        if learn {
            let dense = input.dense();
            for &c in &order {
                let c = c as usize;
                for (slot, &bit) in self.potential[c].iter().enumerate() {
                    let p = &mut self.permanence[c][slot];
                    *p = if dense[bit as usize] {
                        (*p + self.cfg.permanence_inc).min(1.0)
                    } else {
                        (*p - self.cfg.permanence_dec).max(0.0)
                    };
                }
            }
        }
        Sdr::new(self.cfg.n_columns, order)
    }
}
