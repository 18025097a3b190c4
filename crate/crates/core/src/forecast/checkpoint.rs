//! JSON checkpoint container.
//!
//! ```json
//! {
//!   "format": "meshcast-recurrent-net",
//!   "version": 1,
//!   "config": { ... },
//!   "sensor_ids": ["s1", ...],
//!   "normalization": { "ranges": [{"min": .., "max": ..}, ...] },
//!   "tensors": [{"name": "layer0.w", "shape": [128, 15], "values": [...]}, ...]
//! }
//! ```
//!
//! Tensors are row-major and listed per layer as `w`, `u`, `b`, then
//! `head.w` and `head.b`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{param_count, Layout, RecurrentNetConfig, RecurrentNetState};
use crate::error::{Error, Result};
use crate::model::NormalizationParams;

pub const CHECKPOINT_FORMAT: &str = "meshcast-recurrent-net";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RecurrentNetConfig,
    pub sensor_ids: Vec<String>,
    pub normalization: Option<NormalizationParams>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(state: &RecurrentNetState, sensor_ids: Vec<String>, normalization: Option<NormalizationParams>) -> Self {
        let layout = state.layout();
        let p = state.params();
        let g = layout.gates;
        let mut tensors = Vec::new();
        for (i, l) in layout.layers.iter().enumerate() {
            let gh = g * l.hidden;
            for (name, shape, range) in [
                ("w", vec![gh, l.input], l.w..l.u),
                ("u", vec![gh, l.hidden], l.u..l.b),
                ("b", vec![gh], l.b..l.end),
            ] {
                tensors.push(Tensor {
                    name: format!("layer{i}.{name}"),
                    shape,
                    values: p[range].to_vec(),
                });
            }
        }
        tensors.push(Tensor {
            name: "head.w".into(),
            shape: vec![layout.head_b - layout.head_w],
            values: p[layout.head_w..layout.head_b].to_vec(),
        });
        tensors.push(Tensor {
            name: "head.b".into(),
            shape: vec![1],
            values: vec![p[layout.head_b]],
        });
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: state.config().clone(),
            sensor_ids,
            normalization,
            tensors,
        }
    }

    pub fn state(&self) -> Result<RecurrentNetState> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let expected = Checkpoint::new(
            &RecurrentNetState::from_params(self.config.clone(), vec![0.0; param_count(&self.config)])?,
            Vec::new(),
            None,
        );
        if expected.tensors.len() != self.tensors.len() {
            return Err(Error::Shape {
                expected: format!("{} tensors", expected.tensors.len()),
                actual: self.tensors.len().to_string(),
            });
        }
        let mut params = Vec::with_capacity(Layout::new(&self.config).total);
        for (want, got) in expected.tensors.iter().zip(&self.tensors) {
            if want.name != got.name || want.shape != got.shape || got.values.len() != want.values.len() {
                return Err(Error::Shape {
                    expected: format!("{} {:?}", want.name, want.shape),
                    actual: format!("{} {:?} ({} values)", got.name, got.shape, got.values.len()),
                });
            }
            params.extend_from_slice(&got.values);
        }
        RecurrentNetState::from_params(self.config.clone(), params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::net::{net_init, CellKind};

    #[test]
    fn round_trip_is_exact() {
        for cell in [CellKind::Lstm, CellKind::Gru] {
            let cfg = RecurrentNetConfig {
                hidden: vec![3, 2],
                ..RecurrentNetConfig::new(6, cell)
            };
            let state = net_init(&cfg).unwrap();
            let ck = Checkpoint::new(&state, vec!["a".into(), "b".into()], Some(NormalizationParams::identity()));
            assert_eq!(ck.tensors[0].shape, vec![cell.gates() * 3, 6]);
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.state().unwrap().params(), state.params());
        }
    }

    #[test]
    fn tampered_shapes_rejected() {
        let state = net_init(&RecurrentNetConfig {
            hidden: vec![2],
            ..RecurrentNetConfig::new(3, CellKind::Lstm)
        })
        .unwrap();
        let mut ck = Checkpoint::new(&state, vec![], None);
        ck.tensors[1].values.pop();
        assert!(matches!(ck.state(), Err(Error::Shape { .. })));
        let mut ck = Checkpoint::new(&state, vec![], None);
        ck.version = 9;
        assert!(ck.state().is_err());
    }
}
