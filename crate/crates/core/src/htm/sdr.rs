use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse distributed representation: a fixed-width binary vector stored
/// as its sorted, unique active indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sdr {
    width: usize,
    active: Vec<u32>,
}

impl Sdr {
    pub fn new(width: usize, mut active: Vec<u32>) -> Result<Self> {
        active.sort_unstable();
        active.dedup();
        if let Some(&last) = active.last() {
            if last as usize >= width {
                return Err(Error::Shape {
                    expected: format!("indices below {width}"),
                    actual: last.to_string(),
                });
            }
        }
        Ok(Self { width, active })
    }

    pub fn empty(width: usize) -> Self {
        Self { width, active: Vec::new() }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn active(&self) -> &[u32] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn contains(&self, bit: u32) -> bool {
        self.active.binary_search(&bit).is_ok()
    }

    /// Number of shared active bits.
    pub fn overlap(&self, other: &Sdr) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.active.len() && j < other.active.len() {
            match self.active[i].cmp(&other.active[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    /// Places `parts` side by side, offsetting each by the widths before it.
    pub fn concat(parts: &[Sdr]) -> Sdr {
        let mut width = 0;
        let mut active = Vec::with_capacity(parts.iter().map(Sdr::len).sum());
        for p in parts {
            active.extend(p.active.iter().map(|&b| b + width as u32));
            width += p.width;
        }
        Sdr { width, active }
    }

    pub fn dense(&self) -> Vec<bool> {
        let mut v = vec![false; self.width];
        for &b in &self.active {
            v[b as usize] = true;
        }
        v
    }
}
