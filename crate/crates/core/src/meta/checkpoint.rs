use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::hyper::HyperParams;
use crate::error::{Error, Result};
use crate::io::{read_rten, write_rten};
use crate::nn::{layout, ModelConfig, ParameterSet};
use crate::tensor::Tensor;

/// JSON sidecar stored next to the parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: String,
    pub config: ModelConfig,
    pub hyper: HyperParams,
    pub iteration: usize,
    pub val_acc: Option<f64>,
    pub seed: u64,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("rten"), stem.with_extension("json"))
}

/// Writes `<stem>.rten` (flat parameters) and `<stem>.json`.
pub fn save_checkpoint(stem: impl AsRef<Path>, params: &ParameterSet, meta: &CheckpointMeta) -> Result<(PathBuf, PathBuf)> {
    let (rten, json) = paths(stem.as_ref());
    write_rten(&rten, &Tensor::new(vec![params.len()], params.values().to_vec())?)?;
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok((rten, json))
}

pub fn load_checkpoint(stem: impl AsRef<Path>) -> Result<(ParameterSet, CheckpointMeta)> {
    let (rten, json) = paths(stem.as_ref());
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: json.clone(),
        reason: e.to_string(),
    })?;
    let t = read_rten(&rten)?;
    let params = ParameterSet::from_values(layout(&meta.config)?, t.into_data()).map_err(|e| {
        Error::config(format!("checkpoint {} does not fit its architecture: {e}", rten.display()))
    })?;
    Ok((params, meta))
}
