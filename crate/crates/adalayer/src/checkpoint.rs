//! Model checkpoints: JSON with the model config and one flat f32 array per
//! named tensor.
//!
//! Keys follow the `named_affines` convention (`embed/w`, `block00/w1`,
//! `router03/b2`, `head/b`, ...) and live in a sorted map, so serialization
//! order is stable. Values round-trip bitwise: serde_json prints the shortest
//! decimal that recovers the exact f32.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fileio;
use crate::model::{Model, ModelConfig};
use crate::rng::Stream;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: BTreeMap<String, Vec<f32>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let mut params = BTreeMap::new();
        for (prefix, suffix, affine) in model.named_affines() {
            params.insert(format!("{prefix}/w{suffix}"), affine.w.data().to_vec());
            params.insert(format!("{prefix}/b{suffix}"), affine.b.clone());
        }
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            params,
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::invalid(
                "format_version",
                format!("expected {CHECKPOINT_VERSION}, got {}", self.format_version),
            ));
        }
        self.config.validate()?;
        // Parameters are fully overwritten below; the seed only feeds the
        // throwaway initialization.
        let mut model = Model::init(&self.config, &mut Stream::seeded(0))?;
        let mut consumed = 0usize;
        for (prefix, suffix, affine) in model.named_affines_mut() {
            for (key, target) in [
                (format!("{prefix}/w{suffix}"), affine.w.data_mut()),
                (format!("{prefix}/b{suffix}"), affine.b.as_mut_slice()),
            ] {
                let values = self
                    .params
                    .get(&key)
                    .ok_or_else(|| Error::invalid("params", format!("missing tensor `{key}`")))?;
                if values.len() != target.len() {
                    return Err(Error::ShapeMismatch {
                        context: format!("tensor `{key}`"),
                        expected: format!("{} values", target.len()),
                        actual: format!("{} values", values.len()),
                    });
                }
                target.copy_from_slice(values);
                consumed += 1;
            }
        }
        if consumed != self.params.len() {
            let expected: std::collections::BTreeSet<String> = Checkpoint::from_model(&model)
                .params
                .into_keys()
                .collect();
            let stray = self
                .params
                .keys()
                .find(|k| !expected.contains(*k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::invalid(
                "params",
                format!("unexpected tensor `{stray}`"),
            ));
        }
        model.check_finite()?;
        Ok(model)
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    fileio::write_json(path, &Checkpoint::from_model(model))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let ckpt: Checkpoint = fileio::read_json(path)?;
    ckpt.into_model()
}
