//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `HINTCKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON header, then every parameter as
//! little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{HoldoutSet, Normalizer};
use crate::error::{Error, Result};

use super::layers::{tensor_from_f64, RunningStats};
use super::{tensor_to_vec, HintModel, ModelConfig};

const MAGIC: &[u8; 8] = b"HINTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything besides the weights needed to reuse a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_hash: String,
    pub columns: Vec<String>,
    pub normalizer: Normalizer,
    pub node_ids: Vec<String>,
    pub holdout: HoldoutSet,
    pub window_length: usize,
    pub seed: u64,
    pub config_hash: String,
    pub epoch: usize,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    n_static: usize,
    params: Vec<ParamEntry>,
    running: Vec<RunningStats>,
    meta: CheckpointMeta,
}

pub fn save_checkpoint(path: &Path, model: &HintModel, meta: &CheckpointMeta) -> Result<()> {
    let header = Header {
        model: model.config().clone(),
        n_static: model.n_static(),
        params: model
            .params()
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.var.dims().to_vec(),
            })
            .collect(),
        running: model.running_stats().to_vec(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Input(e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + 8 * model.params().num_scalars() + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in model.params().params() {
        for v in tensor_to_vec(p.var.as_tensor())? {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, dtype: candle_core::DType) -> Result<(HintModel, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::parse(path, m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Compat(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::parse(path, e.to_string()))?;
    let mut payload = &body[hlen..];
    let mut model = HintModel::new(header.model, header.n_static, dtype, 0)?;
    if header.params.len() != model.params().params().len() {
        return Err(Error::Compat("checkpoint parameter list does not match the model".into()));
    }
    for (entry, param) in header.params.iter().zip(model.params().params()) {
        if entry.name != param.name || entry.shape != param.var.dims() {
            return Err(Error::Compat(format!(
                "checkpoint parameter {} {:?} does not match {} {:?}",
                entry.name,
                entry.shape,
                param.name,
                param.var.dims()
            )));
        }
        let count: usize = entry.shape.iter().product();
        if payload.len() < 8 * count {
            return Err(bad("truncated parameter payload"));
        }
        let values: Vec<f64> = payload[..8 * count]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        payload = &payload[8 * count..];
        let t = tensor_from_f64(values, &entry.shape, dtype, model.device())?;
        param.var.set(&t)?;
    }
    if !payload.is_empty() {
        return Err(bad("trailing bytes after parameters"));
    }
    model.set_running_stats(header.running)?;
    Ok((model, header.meta))
}

impl CheckpointMeta {
    /// Fails with a compatibility error if the static feature schema differs.
    pub fn check_schema(&self, schema_hash: &str) -> Result<()> {
        if self.schema_hash != schema_hash {
            return Err(Error::Compat(format!(
                "static feature schema {schema_hash} does not match the checkpoint schema {}",
                self.schema_hash
            )));
        }
        Ok(())
    }

    pub fn check_nodes(&self, node_ids: &[String]) -> Result<()> {
        if self.node_ids != node_ids {
            return Err(Error::Compat(
                "node ids differ from those the checkpoint was trained on".into(),
            ));
        }
        Ok(())
    }
}
