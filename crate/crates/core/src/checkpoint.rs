//! Versioned JSON container for trained models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabelCatalog;
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub catalog: LabelCatalog,
    pub model: ModelConfig,
    /// Effective run configuration, recorded verbatim.
    pub config: serde_json::Value,
    pub vocab: Vocab,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: serde_json::Value) -> Self {
        let params = model
            .params
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                shape: [p.value.rows(), p.value.cols()],
                data: p.value.data().to_vec(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            catalog: model.catalog.clone(),
            model: model.config,
            config,
            vocab: model.vocab.clone(),
            params,
        }
    }

    /// Rebuilds the model; every stored tensor must match a registered parameter.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(self.model, self.vocab, self.catalog, 0)?;
        if self.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored tensors for {} parameters",
                self.params.len(),
                model.params.len()
            )));
        }
        for t in self.params {
            let id = model
                .params
                .id(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {:?}", t.name)))?;
            let value = Tensor::new(t.shape[0], t.shape[1], t.data)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", t.name)))?;
            model
                .params
                .set(id, value)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", t.name)))?;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json_err = |source| Error::Json {
            path: path.to_path_buf(),
            source,
        };
        let value: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing format_version", path.display())))?;
        if found != FORMAT_VERSION as u64 {
            return Err(Error::CheckpointVersion {
                found: found as u32,
                expected: FORMAT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(json_err)
    }
}
