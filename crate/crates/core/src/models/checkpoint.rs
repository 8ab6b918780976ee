//! Name-to-array checkpoints in the safetensors format.
//!
//! Names follow `encoder.layerN.*`, `decoder.nodeI.sourceJ.*` and `head.*`;
//! the model configuration is stored as JSON in the file metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;

pub const CONFIG_KEY: &str = "model_config";

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Writes every parameter and buffer as little-endian f64, plus metadata.
pub fn save_checkpoint(model: &Model, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
    let owned: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .store()
        .iter()
        .map(|(_, e)| {
            let bytes = e.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (e.name.clone(), e.value.shape().to_vec(), bytes)
        })
        .collect();
    let views = owned
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(ckpt_err)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta: HashMap<String, String> = extra.clone().into_iter().collect();
    meta.insert(CONFIG_KEY.into(), serde_json::to_string(model.config())?);
    safetensors::serialize_to_file(views, Some(meta), path).map_err(ckpt_err)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn decode(view: &TensorView) -> Result<Tensor> {
    let data: Vec<f64> = match view.dtype() {
        Dtype::F64 => view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Tensor::new(view.shape(), data)
}

/// Reads the stored configuration and rebuilds the model with the saved weights.
pub fn load_checkpoint(path: &Path) -> Result<(Model, BTreeMap<String, String>)> {
    let bytes = read_file(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(ckpt_err)?;
    let meta: BTreeMap<String, String> = meta.metadata().clone().unwrap_or_default().into_iter().collect();
    let cfg_json = meta
        .get(CONFIG_KEY)
        .ok_or_else(|| Error::Checkpoint(format!("{} has no `{CONFIG_KEY}` metadata", path.display())))?;
    let cfg: ModelConfig = serde_json::from_str(cfg_json)?;
    let mut model = build_model(&cfg, 0)?;
    load_weights(&mut model, path)?;
    Ok((model, meta))
}

/// Strict load: every model entry must be present with the same shape.
pub fn load_weights(model: &mut Model, path: &Path) -> Result<()> {
    let bytes = read_file(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(ckpt_err)?;
    let ids: Vec<_> = model.store().iter().map(|(id, e)| (id, e.name.clone())).collect();
    for (id, name) in ids {
        let view = st
            .tensor(&name)
            .map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        let t = decode(&view)?;
        if t.shape() != model.store().get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{name}`: {:?} vs {:?}",
                t.shape(),
                model.store().get(id).shape()
            )));
        }
        *model.store_mut().get_mut(id) = t;
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Encoder entries copied from the file.
    pub matched: Vec<String>,
    /// Encoder entries left at initialization.
    pub missed: Vec<String>,
}

/// Copies encoder entries whose name and shape match; everything else keeps
/// its initialization.
pub fn load_pretrained(model: &mut Model, path: &Path) -> Result<LoadReport> {
    let bytes = read_file(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(ckpt_err)?;
    let encoder: Vec<_> = model
        .store()
        .iter()
        .filter(|(_, e)| e.name.starts_with("encoder."))
        .map(|(id, e)| (id, e.name.clone()))
        .collect();
    let mut report = LoadReport::default();
    for (id, name) in encoder {
        let loaded = match st.tensor(&name) {
            Ok(view) => Some(decode(&view)?).filter(|t| t.shape() == model.store().get(id).shape()),
            Err(_) => None,
        };
        match loaded {
            Some(t) => {
                *model.store_mut().get_mut(id) = t;
                report.matched.push(name);
            }
            None => report.missed.push(name),
        }
    }
    if report.matched.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} matched no encoder parameters",
            path.display()
        )));
    }
    Ok(report)
}
