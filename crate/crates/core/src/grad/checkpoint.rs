//! JSON checkpoint: architecture descriptor, named flat parameter arrays and
//! the training configuration that produced them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GradError, ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "unrest-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub architecture: serde_json::Value,
    pub training_config: serde_json::Value,
    /// Identifier of the run manifest that produced this checkpoint.
    #[serde(default)]
    pub manifest_id: String,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_store(
        architecture: serde_json::Value,
        training_config: serde_json::Value,
        store: &ParamStore,
    ) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            architecture,
            training_config,
            manifest_id: String::new(),
            params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Rejects an architecture whose weight tables, given as `(rows, cols)`,
    /// would hold more values than the checkpoint stores. Runs before the
    /// network is allocated.
    pub fn check_tables(&self, tables: &[(usize, usize)]) -> Result<(), GradError> {
        let have = self.param_count();
        for &(r, c) in tables {
            if r.saturating_mul(c) > have {
                return Err(GradError::Checkpoint(format!(
                    "architecture needs a {r}x{c} table but only {have} values are stored"
                )));
            }
        }
        Ok(())
    }

    pub fn to_store(&self) -> Result<ParamStore, GradError> {
        let mut store = ParamStore::new();
        for p in &self.params {
            store.add(p.name.clone(), Tensor::new(p.shape.clone(), p.data.clone())?)?;
        }
        Ok(store)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GradError> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| GradError::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(GradError::Checkpoint(format!(
                "format mismatch: expected {CHECKPOINT_FORMAT}, found {}",
                ckpt.format
            )));
        }
        for p in &ckpt.params {
            if p.shape.iter().product::<usize>() != p.data.len() {
                return Err(GradError::Checkpoint(format!("parameter {} has inconsistent shape", p.name)));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), GradError> {
        fs::write(path, self.to_json()).map_err(|e| GradError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, GradError> {
        let text = fs::read_to_string(path).map_err(|e| GradError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
