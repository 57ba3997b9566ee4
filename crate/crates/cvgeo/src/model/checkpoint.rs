//! Versioned checkpoint container.
//!
//! A checkpoint is one JSON document holding every parameter tensor (by
//! name), the optimizer moments, the epoch counter and the fully resolved
//! run configuration. JSON floats round-trip `f64` exactly, so a reload
//! reproduces the run bit for bit. `FORMAT_VERSION` is bumped on any
//! incompatible layout change and checked on load.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::train::{Adam, Moments, TrainConfig};
use crate::model::{GeoLocalizer, ModelConfig};
use crate::run::RunConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    fn from_array(name: &str, value: &ArrayD<f64>) -> Self {
        Self {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            data: value.iter().copied().collect(),
        }
    }

    fn to_array(&self) -> Result<ArrayD<f64>> {
        ArrayD::from_shape_vec(self.shape.clone(), self.data.clone())
            .map_err(|e| Error::Validation(format!("tensor {}: {e}", self.name)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moments: Vec<NamedTensor>,
    pub second_moments: Vec<NamedTensor>,
}

/// Serializable snapshot of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub run: RunConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    /// Snapshots a model (and optionally its optimizer) after `epoch`
    /// completed epochs.
    pub fn capture(
        model: &GeoLocalizer,
        optimizer: Option<&Adam>,
        epoch: usize,
        run: &RunConfig,
    ) -> Self {
        let params = model
            .params
            .iter()
            .map(|(_, e)| NamedTensor::from_array(&e.name, &e.value))
            .collect();
        let optimizer = optimizer.map(|adam| {
            let mut first = Vec::new();
            let mut second = Vec::new();
            for (id, entry) in model.params.iter() {
                if let Some(Some(m)) = adam.moments.get(id.index()) {
                    first.push(NamedTensor::from_array(&entry.name, &m.m));
                    second.push(NamedTensor::from_array(&entry.name, &m.v));
                }
            }
            OptimizerState {
                steps: adam.t,
                beta1: adam.beta1,
                beta2: adam.beta2,
                eps: adam.eps,
                first_moments: first,
                second_moments: second,
            }
        });
        Self {
            version: FORMAT_VERSION,
            epoch,
            run: run.clone(),
            model: model.config().clone(),
            train: run.train,
            params,
            optimizer,
        }
    }

    /// Rebuilds the model (and optimizer, when present) from the snapshot.
    pub fn restore(&self) -> Result<(GeoLocalizer, Adam, usize)> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        let mut model = GeoLocalizer::new(self.model.clone(), self.run.seed)?;
        let named: Vec<(String, ArrayD<f64>)> = self
            .params
            .iter()
            .map(|t| Ok((t.name.clone(), t.to_array()?)))
            .collect::<Result<_>>()?;
        model.params.load_named(&named)?;

        let mut adam = Adam::new();
        if let Some(state) = &self.optimizer {
            adam.beta1 = state.beta1;
            adam.beta2 = state.beta2;
            adam.eps = state.eps;
            adam.t = state.steps;
            adam.moments = vec![None; model.params.len()];
            for (mt, vt) in state.first_moments.iter().zip(&state.second_moments) {
                let (id, _) = model
                    .params
                    .iter()
                    .find(|(_, e)| e.name == mt.name)
                    .ok_or_else(|| {
                        Error::Validation(format!("optimizer moment for unknown parameter {}", mt.name))
                    })?;
                adam.moments[id.index()] = Some(Moments {
                    m: mt.to_array()?,
                    v: vt.to_array()?,
                });
            }
        }
        Ok((model, adam, self.epoch))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read checkpoint {path:?}: {e}")))?;
        Ok(serde_json::from_str(&json)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::backbone::{BackboneConfig, BlockKind, StageSpec};
    use crate::model::bbox::BBox;
    use crate::model::train::{train_step, Batch};
    use crate::csha::CshaConfig;
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::toy(crate::vspe::View::Drone);
        run.backbone = BackboneConfig::Custom(vec![StageSpec {
            out_channels: 6,
            blocks: 1,
            downsample: true,
            kind: BlockKind::Plain,
        }]);
        run.csha = CshaConfig {
            kernel_size: 3,
            ..Default::default()
        };
        run.query_size = (8, 8);
        run.reference_size = (8, 8);
        run
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let run = tiny_run();
        let mut model = GeoLocalizer::new(run.model_config(), run.seed).unwrap();
        let mut adam = Adam::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = Batch {
            queries: ndarray::ArrayD::from_shape_fn(IxDyn(&[1, 4, 8, 8]), |_| rng.gen_range(0.0..1.0)),
            references: ndarray::ArrayD::from_shape_fn(IxDyn(&[1, 3, 8, 8]), |_| {
                rng.gen_range(0.0..1.0)
            }),
            gt_boxes: vec![BBox::new(4.0, 4.0, 3.0, 2.0)],
        };
        for _ in 0..3 {
            train_step(&mut model, &mut adam, &batch, 1e-3).unwrap();
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let ckpt = Checkpoint::capture(&model, Some(&adam), 3, &run);
        ckpt.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        let (mut model2, mut adam2, epoch) = loaded.restore().unwrap();
        assert_eq!(epoch, 3);
        for ((_, a), (_, b)) in model.params.iter().zip(model2.params.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        // one more step on each must stay in lockstep
        let l1 = train_step(&mut model, &mut adam, &batch, 1e-3).unwrap();
        let l2 = train_step(&mut model2, &mut adam2, &batch, 1e-3).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let run = tiny_run();
        let model = GeoLocalizer::new(run.model_config(), run.seed).unwrap();
        let mut ckpt = Checkpoint::capture(&model, None, 0, &run);
        ckpt.version = 99;
        assert!(matches!(ckpt.restore(), Err(Error::Validation(_))));
    }
}
