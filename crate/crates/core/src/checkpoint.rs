//! Model archives.
//!
//! An archive is one JSON document:
//!
//! ```text
//! {
//!   "format": "intentrec-model",
//!   "version": 1,
//!   "variant": "full",
//!   "items": 500,
//!   "config": { ...ModelConfig... },
//!   "config_fingerprint": "<sha256 of the config JSON>",
//!   "backbone_fingerprint": "<sha256 of the frozen encoder tensors>" | null,
//!   "tensors": [ { "name": "...", "shape": [r, c], "trainable": bool, "data": [...] } ]
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so loading restores every
//! tensor bit for bit. Loading rebuilds the architecture from `variant`,
//! `items` and `config`, then requires the stored tensor set to match it
//! exactly (names, shapes and trainable flags).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{fingerprint, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::tensor::Tensor;

pub const FORMAT: &str = "intentrec-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archive {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub items: usize,
    pub config: ModelConfig,
    pub config_fingerprint: String,
    pub backbone_fingerprint: Option<String>,
    pub tensors: Vec<NamedTensor>,
}

impl Archive {
    pub fn from_model(model: &Model) -> Self {
        let tensors = model
            .store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable(),
                data: p.tensor.data().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            variant: model.variant,
            items: model.items,
            config: model.config.clone(),
            config_fingerprint: fingerprint(&model.config),
            backbone_fingerprint: model.backbone_fingerprint(),
            tensors,
        }
    }

    /// Rebuilds the model. `expected_backbone` pins the frozen encoder the
    /// archive must carry.
    pub fn into_model(self, expected_backbone: Option<&str>) -> Result<Model> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("not a model archive (format {:?})", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported archive version {}", self.version)));
        }
        if fingerprint(&self.config) != self.config_fingerprint {
            return Err(Error::Checkpoint("config fingerprint does not match the stored config".into()));
        }
        let mut model = Model::new(self.variant, self.items, &self.config, None, 0)?;
        if model.store.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "archive holds {} tensors, the {} architecture has {}",
                self.tensors.len(),
                self.variant,
                model.store.len()
            )));
        }
        for t in self.tensors {
            let id = model
                .store
                .id(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {:?}", t.name)))?;
            if model.store.param(id).trainable() != t.trainable {
                return Err(Error::Checkpoint(format!("trainable flag of {:?} differs", t.name)));
            }
            let value = Tensor::new(t.shape, t.data)
                .map_err(|e| Error::Checkpoint(format!("tensor {:?}: {e}", t.name)))?;
            model
                .store
                .set_value(id, value)
                .map_err(|e| Error::Checkpoint(format!("tensor {:?}: {e}", t.name)))?;
        }
        let actual = model.backbone_fingerprint();
        if actual != self.backbone_fingerprint {
            return Err(Error::Checkpoint("frozen encoder tensors do not match the stored fingerprint".into()));
        }
        if let Some(want) = expected_backbone {
            if actual.as_deref() != Some(want) {
                return Err(Error::Checkpoint(format!(
                    "archive encoder {} does not match the expected encoder {want}",
                    actual.as_deref().unwrap_or("(none)")
                )));
            }
        }
        Ok(model)
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let json = serde_json::to_vec(&Archive::from_model(model))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path, expected_backbone: Option<&str>) -> Result<Model> {
    let bytes = fs::read(path)?;
    let archive: Archive =
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    archive.into_model(expected_backbone)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sequences;
    use crate::lid::BACKBONE_PREFIX;

    fn cfg() -> ModelConfig {
        ModelConfig {
            prefix_tokens: 2,
            intent_tokens: 2,
            intent_dim: 8,
            hidden_dim: 8,
            layers: 1,
            backbone_layers: 1,
            heads: 2,
            max_len: 6,
            baseline_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn full() -> Model {
        let enc = Model::new(Variant::Encoder, 12, &cfg(), None, 3).unwrap();
        Model::new(Variant::Full, 12, &cfg(), Some(&enc), 4).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let seqs = Sequences::from_histories(&[&[1, 2, 3], &[7]]).unwrap();
        for model in [full(), Model::new(Variant::Baseline, 12, &cfg(), None, 5).unwrap()] {
            save_model(&model, &path).unwrap();
            let back = load_model(&path, model.backbone_fingerprint().as_deref()).unwrap();
            assert_eq!(back.store.checksum(""), model.store.checksum(""));
            assert!(back.score(&seqs).unwrap().bit_eq(&model.score(&seqs).unwrap()));
            assert_eq!(back.store.trainable_names(), model.store.trainable_names());
        }
    }

    #[test]
    fn mismatched_encoder_is_rejected() {
        let model = full();
        let err = Archive::from_model(&model).into_model(Some("00")).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));

        let mut tampered = Archive::from_model(&model);
        let t = tampered.tensors.iter_mut().find(|t| t.name.starts_with(BACKBONE_PREFIX)).unwrap();
        t.data[0] += 1.0;
        assert!(matches!(tampered.into_model(None), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn structural_mismatches_are_rejected() {
        let model = full();
        let mut a = Archive::from_model(&model);
        a.tensors.pop();
        assert!(a.into_model(None).is_err());
        let mut b = Archive::from_model(&model);
        b.config.hidden_dim = 16;
        assert!(b.into_model(None).is_err());
        let mut c = Archive::from_model(&model);
        c.version = 2;
        assert!(c.into_model(None).is_err());
    }
}
