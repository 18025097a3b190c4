//! Temporal memory: per-column cells with distal dendritic segments that
//! learn which cells precede each column's activation.
//!
//! Connections are kept in arenas with stable ids and a presynaptic index,
//! so evaluating segment activity costs time proportional to the synapses
//! of currently active cells, not to the total model size.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sdr;
use crate::error::{Error, Result};

const EPSILON: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalMemoryConfig {
    pub n_columns: usize,
    pub cells_per_column: usize,
    pub activation_threshold: u32,
    pub min_threshold: u32,
    pub initial_permanence: f32,
    pub connected_threshold: f32,
    pub permanence_inc: f32,
    pub permanence_dec: f32,
    pub predicted_segment_decrement: f32,
    pub max_new_synapses: usize,
    pub max_segments_per_cell: usize,
    pub max_synapses_per_segment: usize,
    pub seed: u64,
}

impl Default for TemporalMemoryConfig {
    fn default() -> Self {
        Self {
            n_columns: 1024,
            cells_per_column: 8,
            activation_threshold: 10,
            min_threshold: 8,
            initial_permanence: 0.21,
            connected_threshold: 0.5,
            permanence_inc: 0.1,
            permanence_dec: 0.05,
            predicted_segment_decrement: 0.01,
            max_new_synapses: 20,
            max_segments_per_cell: 32,
            max_synapses_per_segment: 32,
            seed: 1960,
        }
    }
}

impl TemporalMemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_columns == 0 || self.cells_per_column == 0 {
            return Err(Error::InvalidConfig("temporal memory needs columns and cells".into()));
        }
        if self.min_threshold > self.activation_threshold {
            return Err(Error::InvalidConfig("min_threshold exceeds activation_threshold".into()));
        }
        if self.max_segments_per_cell == 0 || self.max_synapses_per_segment == 0 || self.max_new_synapses == 0 {
            return Err(Error::InvalidConfig("segment and synapse caps must be >= 1".into()));
        }
        let perms = [
            self.initial_permanence,
            self.connected_threshold,
            self.permanence_inc,
            self.permanence_dec,
            self.predicted_segment_decrement,
        ];
        if perms.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig("permanence parameters must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_columns * self.cells_per_column
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Synapse {
    presyn: u32,
    segment: u32,
    permanence: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Segment {
    cell: u32,
    synapses: Vec<u32>,
    last_used: u64,
}

/// Learned structure: everything that `learn = false` must leave untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Connections {
    synapses: Vec<Option<Synapse>>,
    free_synapses: Vec<u32>,
    segments: Vec<Option<Segment>>,
    free_segments: Vec<u32>,
    cell_segments: Vec<Vec<u32>>,
    presyn_index: Vec<Vec<u32>>,
    iteration: u64,
    rng: ChaCha8Rng,
}

impl Connections {
    fn new(n_cells: usize, seed: u64) -> Self {
        Self {
            synapses: Vec::new(),
            free_synapses: Vec::new(),
            segments: Vec::new(),
            free_segments: Vec::new(),
            cell_segments: vec![Vec::new(); n_cells],
            presyn_index: vec![Vec::new(); n_cells],
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn segment_count(&self) -> usize {
        self.segments.iter().filter(|s| s.is_some()).count()
    }

    pub fn synapse_count(&self) -> usize {
        self.synapses.iter().filter(|s| s.is_some()).count()
    }

    pub fn permanences(&self) -> impl Iterator<Item = f32> + '_ {
        self.synapses.iter().flatten().map(|s| s.permanence)
    }

    /// Every synapse targets an existing cell and is owned by a live segment.
    pub fn consistent(&self, n_cells: usize) -> bool {
        self.synapses.iter().enumerate().all(|(id, s)| match s {
            None => true,
            Some(s) => {
                (s.presyn as usize) < n_cells
                    && self.segments[s.segment as usize]
                        .as_ref()
                        .is_some_and(|seg| seg.synapses.contains(&(id as u32)))
            }
        })
    }

    fn segment(&self, id: u32) -> Option<&Segment> {
        self.segments.get(id as usize).and_then(Option::as_ref)
    }

    fn create_segment(&mut self, cell: u32, cfg: &TemporalMemoryConfig) -> u32 {
        while self.cell_segments[cell as usize].len() >= cfg.max_segments_per_cell {
            let lru = *self.cell_segments[cell as usize]
                .iter()
                .min_by_key(|&&s| (self.segments[s as usize].as_ref().unwrap().last_used, s))
                .unwrap();
            self.destroy_segment(lru);
        }
        let seg = Segment {
            cell,
            synapses: Vec::new(),
            last_used: self.iteration,
        };
        let id = match self.free_segments.pop() {
            Some(id) => {
                self.segments[id as usize] = Some(seg);
                id
            }
            None => {
                self.segments.push(Some(seg));
                (self.segments.len() - 1) as u32
            }
        };
        self.cell_segments[cell as usize].push(id);
        id
    }

    fn destroy_segment(&mut self, id: u32) {
        let Some(seg) = self.segments[id as usize].take() else { return };
        for syn in seg.synapses {
            self.drop_synapse_record(syn);
        }
        let list = &mut self.cell_segments[seg.cell as usize];
        if let Some(pos) = list.iter().position(|&s| s == id) {
            list.swap_remove(pos);
        }
        self.free_segments.push(id);
    }

    fn drop_synapse_record(&mut self, id: u32) {
        if let Some(syn) = self.synapses[id as usize].take() {
            let list = &mut self.presyn_index[syn.presyn as usize];
            if let Some(pos) = list.iter().position(|&s| s == id) {
                list.swap_remove(pos);
            }
            self.free_synapses.push(id);
        }
    }

    fn destroy_synapse(&mut self, id: u32) {
        let Some(segment) = self.synapses[id as usize].as_ref().map(|s| s.segment) else { return };
        self.drop_synapse_record(id);
        if let Some(seg) = self.segments[segment as usize].as_mut() {
            if let Some(pos) = seg.synapses.iter().position(|&s| s == id) {
                seg.synapses.swap_remove(pos);
            }
            if seg.synapses.is_empty() {
                self.destroy_segment(segment);
            }
        }
    }

    fn create_synapse(&mut self, segment: u32, presyn: u32, permanence: f32) {
        let syn = Synapse {
            presyn,
            segment,
            permanence,
        };
        let id = match self.free_synapses.pop() {
            Some(id) => {
                self.synapses[id as usize] = Some(syn);
                id
            }
            None => {
                self.synapses.push(Some(syn));
                (self.synapses.len() - 1) as u32
            }
        };
        self.presyn_index[presyn as usize].push(id);
        self.segments[segment as usize].as_mut().unwrap().synapses.push(id);
    }

    /// Reinforces synapses from previously active cells and weakens the
    /// rest; synapses that decay to zero are removed.
    fn adapt(&mut self, segment: u32, prev_active: &[bool], inc: f32, dec: f32) {
        let Some(seg) = self.segment(segment) else { return };
        let ids = seg.synapses.clone();
        let mut dead = Vec::new();
        for id in ids {
            let syn = self.synapses[id as usize].as_mut().unwrap();
            let p = if prev_active[syn.presyn as usize] {
                syn.permanence + inc
            } else {
                syn.permanence - dec
            };
            syn.permanence = p.clamp(0.0, 1.0);
            if syn.permanence < EPSILON {
                dead.push(id);
            }
        }
        for id in dead {
            self.destroy_synapse(id);
        }
    }

    fn grow(&mut self, segment: u32, candidates: &[u32], wanted: usize, cfg: &TemporalMemoryConfig) {
        let Some(seg) = self.segment(segment) else { return };
        let existing: Vec<u32> = seg
            .synapses
            .iter()
            .map(|&id| self.synapses[id as usize].as_ref().unwrap().presyn)
            .collect();
        let fresh: Vec<u32> = candidates.iter().copied().filter(|c| !existing.contains(c)).collect();
        let n = wanted.min(fresh.len());
        if n == 0 {
            return;
        }
        let mut picks: Vec<usize> = sample(&mut self.rng, fresh.len(), n).into_vec();
        picks.sort_unstable();

        let overflow = (existing.len() + n).saturating_sub(cfg.max_synapses_per_segment);
        for _ in 0..overflow {
            let seg = self.segments[segment as usize].as_ref().unwrap();
            let Some((pos, &weakest)) = seg.synapses.iter().enumerate().min_by(|(_, a), (_, b)| {
                let pa = self.synapses[**a as usize].as_ref().unwrap().permanence;
                let pb = self.synapses[**b as usize].as_ref().unwrap().permanence;
                pa.total_cmp(&pb).then(a.cmp(b))
            }) else {
                break;
            };
            // the segment may empty out here; it is refilled below
            self.segments[segment as usize].as_mut().unwrap().synapses.swap_remove(pos);
            self.drop_synapse_record(weakest);
        }
        let room = cfg.max_synapses_per_segment - self.segment(segment).map_or(0, |s| s.synapses.len());
        for &k in picks.iter().take(room) {
            self.create_synapse(segment, fresh[k], cfg.initial_permanence);
        }
    }
}

/// Transient per-step activity, replaced on every compute.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Activity {
    active_cells: Vec<u32>,
    winner_cells: Vec<u32>,
    /// Sorted by (cell, id).
    active_segments: Vec<u32>,
    /// (segment, active potential synapses), sorted by (cell, id).
    matching_segments: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TmOutput {
    pub active_cells: Vec<u32>,
    pub predictive_cells: Vec<u32>,
    /// Fraction of active columns that no cell predicted.
    pub anomaly: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalMemory {
    cfg: TemporalMemoryConfig,
    connections: Connections,
    activity: Activity,
}

impl TemporalMemory {
    pub fn new(cfg: TemporalMemoryConfig) -> Result<Self> {
        cfg.validate()?;
        let connections = Connections::new(cfg.n_cells(), cfg.seed);
        Ok(Self {
            cfg,
            connections,
            activity: Activity::default(),
        })
    }

    pub fn config(&self) -> &TemporalMemoryConfig {
        &self.cfg
    }

    pub fn connections(&self) -> &Connections {
        &self.connections
    }

    fn column_of(&self, cell: u32) -> u32 {
        cell / self.cfg.cells_per_column as u32
    }

    fn segment_cell(&self, seg: u32) -> u32 {
        self.connections.segment(seg).map_or(u32::MAX, |s| s.cell)
    }

    /// Columns holding at least one predictive cell.
    pub fn predicted_columns(&self) -> Vec<u32> {
        let mut cols: Vec<u32> = self
            .activity
            .active_segments
            .iter()
            .map(|&s| self.column_of(self.segment_cell(s)))
            .collect();
        cols.dedup();
        cols
    }

    pub fn predictive_cells(&self) -> Vec<u32> {
        let mut cells: Vec<u32> = self.activity.active_segments.iter().map(|&s| self.segment_cell(s)).collect();
        cells.dedup();
        cells
    }

    /// Forgets the current sequence context; learned connections stay.
    pub fn reset(&mut self) {
        self.activity = Activity::default();
    }

    pub fn compute(&mut self, active_columns: &Sdr, learn: bool) -> Result<TmOutput> {
        if active_columns.width() != self.cfg.n_columns {
            return Err(Error::Shape {
                expected: format!("{} columns", self.cfg.n_columns),
                actual: active_columns.width().to_string(),
            });
        }
        let cfg = self.cfg.clone();
        let cpc = cfg.cells_per_column as u32;
        let prev = std::mem::take(&mut self.activity);
        let mut prev_active = vec![false; cfg.n_cells()];
        for &c in &prev.active_cells {
            prev_active[c as usize] = true;
        }

        let predicted_cols: Vec<u32> = {
            let mut v: Vec<u32> = prev.active_segments.iter().map(|&s| self.segment_cell(s) / cpc).collect();
            v.dedup();
            v
        };
        let columns = active_columns.active();
        let unpredicted = columns.iter().filter(|c| predicted_cols.binary_search(c).is_err()).count();
        let anomaly = if columns.is_empty() {
            0.0
        } else {
            unpredicted as f64 / columns.len() as f64
        };

        // segment lists from the previous step, bucketed by column
        let seg_col = |tm: &Self, s: u32| tm.segment_cell(s) / cpc;
        let mut active_cells = Vec::new();
        let mut winner_cells = Vec::new();
        let mut act_i = 0;
        let mut match_i = 0;
        let mut punish = Vec::new();
        if learn {
            self.connections.iteration += 1;
        }

        for &col in columns {
            while act_i < prev.active_segments.len() && seg_col(self, prev.active_segments[act_i]) < col {
                act_i += 1;
            }
            let act_start = act_i;
            while act_i < prev.active_segments.len() && seg_col(self, prev.active_segments[act_i]) == col {
                act_i += 1;
            }
            while match_i < prev.matching_segments.len() && seg_col(self, prev.matching_segments[match_i].0) < col {
                punish.push(prev.matching_segments[match_i].0);
                match_i += 1;
            }
            let match_start = match_i;
            while match_i < prev.matching_segments.len() && seg_col(self, prev.matching_segments[match_i].0) == col {
                match_i += 1;
            }
            let col_active = &prev.active_segments[act_start..act_i];
            let col_matching = &prev.matching_segments[match_start..match_i];

            if !col_active.is_empty() {
                for &seg in col_active {
                    let cell = self.segment_cell(seg);
                    if active_cells.last() != Some(&cell) {
                        active_cells.push(cell);
                        winner_cells.push(cell);
                    }
                    if learn {
                        let potential = col_matching.iter().find(|(s, _)| *s == seg).map_or(0, |m| m.1) as usize;
                        self.learn_on(seg, &prev_active, &prev.winner_cells, potential, &cfg);
                    }
                }
            } else {
                let first = col * cpc;
                active_cells.extend(first..first + cpc);
                let best = col_matching
                    .iter()
                    .fold(None::<(u32, u32)>, |best, &(s, n)| match best {
                        Some((_, bn)) if bn >= n => best,
                        _ => Some((s, n)),
                    });
                let winner = match best {
                    Some((seg, potential)) => {
                        let cell = self.segment_cell(seg);
                        if learn {
                            self.learn_on(seg, &prev_active, &prev.winner_cells, potential as usize, &cfg);
                        }
                        cell
                    }
                    None => {
                        let cell = self.least_used_cell(col, learn);
                        if learn && !prev.winner_cells.is_empty() {
                            let seg = self.connections.create_segment(cell, &cfg);
                            let n = cfg.max_new_synapses.min(prev.winner_cells.len());
                            self.connections.grow(seg, &prev.winner_cells, n, &cfg);
                        }
                        cell
                    }
                };
                winner_cells.push(winner);
            }
        }
        punish.extend(prev.matching_segments[match_i..].iter().map(|m| m.0));

        if learn && cfg.predicted_segment_decrement > 0.0 {
            for seg in punish {
                self.punish(seg, &prev_active, cfg.predicted_segment_decrement);
            }
        }

        winner_cells.sort_unstable();
        winner_cells.dedup();
        self.activity = self.activate_dendrites(active_cells, winner_cells);
        Ok(TmOutput {
            active_cells: self.activity.active_cells.clone(),
            predictive_cells: self.predictive_cells(),
            anomaly,
        })
    }

    fn learn_on(&mut self, seg: u32, prev_active: &[bool], prev_winners: &[u32], potential: usize, cfg: &TemporalMemoryConfig) {
        if let Some(s) = self.connections.segments[seg as usize].as_mut() {
            s.last_used = self.connections.iteration;
        }
        self.connections.adapt(seg, prev_active, cfg.permanence_inc, cfg.permanence_dec);
        let wanted = cfg.max_new_synapses.saturating_sub(potential);
        if wanted > 0 {
            self.connections.grow(seg, prev_winners, wanted, cfg);
        }
    }

    fn punish(&mut self, seg: u32, prev_active: &[bool], dec: f32) {
        let Some(s) = self.connections.segment(seg) else { return };
        let ids = s.synapses.clone();
        let mut dead = Vec::new();
        for id in ids {
            let syn = self.connections.synapses[id as usize].as_mut().unwrap();
            if prev_active[syn.presyn as usize] {
                syn.permanence = (syn.permanence - dec).max(0.0);
                if syn.permanence < EPSILON {
                    dead.push(id);
                }
            }
        }
        for id in dead {
            self.connections.destroy_synapse(id);
        }
    }

    fn least_used_cell(&mut self, col: u32, learn: bool) -> u32 {
        let cpc = self.cfg.cells_per_column as u32;
        let first = col * cpc;
        let counts: Vec<usize> = (first..first + cpc)
            .map(|c| self.connections.cell_segments[c as usize].len())
            .collect();
        let fewest = *counts.iter().min().unwrap();
        let ties: Vec<u32> = (0..cpc).filter(|&i| counts[i as usize] == fewest).collect();
        let pick = if learn && ties.len() > 1 {
            ties[self.connections.rng.random_range(0..ties.len())]
        } else {
            ties[0]
        };
        first + pick
    }

    fn activate_dendrites(&self, mut active_cells: Vec<u32>, winner_cells: Vec<u32>) -> Activity {
        active_cells.sort_unstable();
        let conn = &self.connections;
        let mut connected: std::collections::HashMap<u32, (u32, u32)> = std::collections::HashMap::new();
        let threshold = self.cfg.connected_threshold - EPSILON;
        for &cell in &active_cells {
            for &id in &conn.presyn_index[cell as usize] {
                let syn = conn.synapses[id as usize].as_ref().unwrap();
                let e = connected.entry(syn.segment).or_insert((0, 0));
                e.1 += 1;
                if syn.permanence >= threshold {
                    e.0 += 1;
                }
            }
        }
        let key = |s: u32| (conn.segment(s).unwrap().cell, s);
        let mut active_segments: Vec<u32> = connected
            .iter()
            .filter(|(_, (c, _))| *c >= self.cfg.activation_threshold)
            .map(|(&s, _)| s)
            .collect();
        active_segments.sort_unstable_by_key(|&s| key(s));
        let mut matching_segments: Vec<(u32, u32)> = connected
            .iter()
            .filter(|(_, (_, p))| *p >= self.cfg.min_threshold)
            .map(|(&s, &(_, p))| (s, p))
            .collect();
        matching_segments.sort_unstable_by_key(|&(s, _)| key(s));
        Activity {
            active_cells,
            winner_cells,
            active_segments,
            matching_segments,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols(range: std::ops::Range<u32>) -> Sdr {
        Sdr::new(1024, range.collect()).unwrap()
    }

    #[test]
    fn cold_start_is_fully_anomalous() {
        let mut tm = TemporalMemory::new(TemporalMemoryConfig::default()).unwrap();
        let out = tm.compute(&cols(0..40), true).unwrap();
        assert_eq!(out.anomaly, 1.0);
        assert_eq!(out.active_cells.len(), 40 * 8);
        assert!(out.predictive_cells.is_empty());
    }

    #[test]
    fn alternating_pair_is_learned() {
        let mut tm = TemporalMemory::new(TemporalMemoryConfig::default()).unwrap();
        let (a, b) = (cols(0..40), cols(100..140));
        let mut scores = Vec::new();
        for _ in 0..200 {
            scores.push(tm.compute(&a, true).unwrap().anomaly);
            scores.push(tm.compute(&b, true).unwrap().anomaly);
        }
        let tail = &scores[200..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(mean < 0.2, "mean anomaly {mean}");
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));

        // a pattern on columns never seen before cannot have been predicted
        let out = tm.compute(&cols(500..540), true).unwrap();
        assert_eq!(out.anomaly, 1.0);
    }

    #[test]
    fn predicted_input_scores_zero() {
        let mut tm = TemporalMemory::new(TemporalMemoryConfig::default()).unwrap();
        let (a, b) = (cols(0..40), cols(100..140));
        for _ in 0..50 {
            tm.compute(&a, true).unwrap();
            tm.compute(&b, true).unwrap();
        }
        tm.compute(&a, true).unwrap();
        assert_eq!(tm.predicted_columns(), (100..140).collect::<Vec<_>>());
        assert_eq!(tm.compute(&b, true).unwrap().anomaly, 0.0);
    }

    #[test]
    fn inference_leaves_connections_untouched() {
        let mut tm = TemporalMemory::new(TemporalMemoryConfig::default()).unwrap();
        for i in 0..30u32 {
            tm.compute(&cols((i % 3) * 50..(i % 3) * 50 + 40), true).unwrap();
        }
        let before = tm.connections().clone();
        for i in 0..30u32 {
            tm.compute(&cols((i % 5) * 40..(i % 5) * 40 + 40), false).unwrap();
        }
        assert_eq!(tm.connections(), &before);
    }

    #[test]
    fn caps_and_permanence_bounds_hold_under_noise() {
        let cfg = TemporalMemoryConfig {
            max_segments_per_cell: 2,
            max_synapses_per_segment: 12,
            ..TemporalMemoryConfig::default()
        };
        let mut tm = TemporalMemory::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..400 {
            let picks = sample(&mut rng, 1024, 40).into_iter().map(|c| c as u32).collect();
            tm.compute(&Sdr::new(1024, picks).unwrap(), true).unwrap();
        }
        let conn = tm.connections();
        assert!(conn.permanences().all(|p| (0.0..=1.0).contains(&p)));
        assert!(conn.cell_segments.iter().all(|s| s.len() <= 2));
        assert!(conn.segments.iter().flatten().all(|s| s.synapses.len() <= 12));
        assert!(conn.consistent(cfg.n_cells()));
    }

    #[test]
    fn column_width_checked() {
        let mut tm = TemporalMemory::new(TemporalMemoryConfig::default()).unwrap();
        assert!(tm.compute(&Sdr::empty(10), true).is_err());
    }
}
