use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "NJET1";

/// On-disk model: a JSON document tagged with [`CHECKPOINT_MAGIC`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub model: Model,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        magic: CHECKPOINT_MAGIC.to_string(),
        model: model.clone(),
    };
    let text = serde_json::to_string(&ckpt)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("magic").and_then(|m| m.as_str()) {
        Some(CHECKPOINT_MAGIC) => {}
        Some(other) => {
            return Err(Error::Checkpoint(format!(
                "unsupported format {other:?}, expected {CHECKPOINT_MAGIC:?}"
            )))
        }
        None => return Err(Error::Checkpoint("missing magic string".into())),
    }
    let ckpt: Checkpoint = serde_json::from_value(value)?;
    let mut model = ckpt.model;
    model.zero_grad();
    Ok(model)
}
