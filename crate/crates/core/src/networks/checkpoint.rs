//! Self-describing JSON checkpoint container.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "kind": "rnnt" | "token_lm",
//!   "vocabulary": ["a", "b", ...],
//!   "config": { ...shape fields of the model kind... },
//!   "meta": { ...free-form string pairs... },
//!   "tensors": [ { "name": "joint.W_out", "rows": 9, "cols": 32, "data": [...] }, ... ]
//! }
//! ```
//!
//! Tensors are stored in [`ParamSet`] order; loading checks every name and
//! shape against a freshly built model of the stated config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, RnntModel};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamSet};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Rnnt,
    TokenLm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub vocabulary: Vocabulary,
    pub config: serde_json::Value,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture<P: ParamSet>(
        kind: CheckpointKind,
        vocabulary: &Vocabulary,
        config: serde_json::Value,
        params: &P,
    ) -> Self {
        let tensors = params
            .names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, m)| NamedTensor {
                name,
                rows: m.rows(),
                cols: m.cols(),
                data: m.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format_version: FORMAT_VERSION,
            kind,
            vocabulary: vocabulary.clone(),
            config,
            meta: BTreeMap::new(),
            tensors,
        }
    }

    /// Copies the stored tensors into `params`, which must have been built
    /// with the stored config.
    pub fn restore_into<P: ParamSet>(&self, params: &mut P) -> Result<()> {
        let names = params.names();
        let mut slots = params.tensors_mut();
        if slots.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                slots.len()
            )));
        }
        for ((slot, name), stored) in slots.iter_mut().zip(&names).zip(&self.tensors) {
            if &stored.name != name || stored.rows != slot.rows() || stored.cols != slot.cols() {
                return Err(Error::Format(format!(
                    "tensor {} ({}x{}) does not match expected {} ({}x{})",
                    stored.name,
                    stored.rows,
                    stored.cols,
                    name,
                    slot.rows(),
                    slot.cols()
                )));
            }
            **slot = Matrix::from_vec(stored.rows, stored.cols, stored.data.clone())?;
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        if self.kind != kind {
            return Err(Error::Format(format!(
                "checkpoint holds {:?}, expected {:?}",
                self.kind, kind
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl RnntModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_value(self.config).expect("model config serializes");
        Checkpoint::capture(CheckpointKind::Rnnt, &self.vocab, config, self)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CheckpointKind::Rnnt)?;
        let config: ModelConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = RnntModel::zeros(config, ckpt.vocabulary.clone());
        ckpt.restore_into(&mut model)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RnntModel::from_checkpoint(&Checkpoint::load(path)?)
    }
}
