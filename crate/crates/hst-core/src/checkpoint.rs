//! Versioned binary checkpoints.
//!
//! Layout: magic `HSTCKPT\0`, u32 format version, u64 header length, a JSON
//! header (configs, step counter, codebook usage state, metric history, and
//! the parameter manifest), raw little-endian `f64` parameter data in
//! manifest order, and a trailing CRC32 over everything before it.
//! `save -> load -> save` is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HstError, Result};
use crate::linalg::Mat;
use crate::model::{CodebookState, HstModel, ModelConfig};
use crate::train::{MetricsRow, TrainConfig};

pub const MAGIC: &[u8; 8] = b"HSTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: usize,
    codebook_state: CodebookState,
    metrics: Vec<MetricsRow>,
    params: Vec<ParamManifestEntry>,
}

/// A fully materialized checkpoint: everything needed to rebuild the model.
#[derive(Clone, Debug)]
pub struct HstCheckpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub step: usize,
    pub codebook_state: CodebookState,
    pub params: Vec<(String, Mat)>,
    pub metrics: Vec<MetricsRow>,
}

impl HstCheckpoint {
    pub fn from_model(
        model: &HstModel,
        train_config: &TrainConfig,
        step: usize,
        metrics: &[MetricsRow],
    ) -> Self {
        HstCheckpoint {
            format_version: FORMAT_VERSION,
            model_config: model.cfg.clone(),
            train_config: train_config.clone(),
            step,
            codebook_state: model.cb_state_usage.clone(),
            params: model.store.iter().map(|(_, e)| (e.name.clone(), (*e.value).clone())).collect(),
            metrics: metrics.to_vec(),
        }
    }

    /// Rebuild a model: the stored config wins over any caller defaults.
    pub fn into_model(&self) -> Result<HstModel> {
        let mut model = HstModel::new(self.model_config.clone(), 0)?;
        if self.params.len() != model.store.len() {
            return Err(HstError::Checkpoint(format!(
                "parameter count mismatch: file has {}, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, value) in &self.params {
            let r = model.store.find(name).ok_or_else(|| {
                HstError::Checkpoint(format!("unknown parameter `{name}` in checkpoint"))
            })?;
            if model.store.get(r).shape() != value.shape() {
                return Err(HstError::Checkpoint(format!(
                    "parameter `{name}` shape mismatch: file {:?}, model {:?}",
                    value.shape(),
                    model.store.get(r).shape()
                )));
            }
            model.store.set(r, value.clone());
        }
        model.cb_state_usage = self.codebook_state.clone();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            step: self.step,
            codebook_state: self.codebook_state.clone(),
            metrics: self.metrics.clone(),
            params: self
                .params
                .iter()
                .map(|(name, m)| ParamManifestEntry {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| HstError::Checkpoint(format!("header encode: {e}")))?;
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.format_version.to_le_bytes());
        buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header_json);
        for (_, m) in &self.params {
            for v in m.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| HstError::io(&tmp, e))?;
            f.write_all(&buf).map_err(|e| HstError::io(&tmp, e))?;
            f.sync_all().map_err(|e| HstError::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| HstError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| HstError::io(path, e))?
            .read_to_end(&mut buf)
            .map_err(|e| HstError::io(path, e))?;
        if buf.len() < MAGIC.len() + 4 + 8 + 4 {
            return Err(HstError::CheckpointChecksum);
        }
        if &buf[..8] != MAGIC {
            return Err(HstError::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        // Verify the trailing checksum before trusting anything else.
        let body_len = buf.len() - 4;
        let stored_crc = u32::from_le_bytes(buf[body_len..].try_into().expect("4 bytes"));
        if crc32fast::hash(&buf[..body_len]) != stored_crc {
            return Err(HstError::CheckpointChecksum);
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(HstError::CheckpointVersion { found: version, expected: FORMAT_VERSION });
        }
        let header_len = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20 + header_len;
        if header_end > body_len {
            return Err(HstError::CheckpointChecksum);
        }
        let header: Header = serde_json::from_slice(&buf[20..header_end])
            .map_err(|e| HstError::Checkpoint(format!("header decode: {e}")))?;
        let mut offset = header_end;
        let mut params = Vec::with_capacity(header.params.len());
        for entry in &header.params {
            let n = entry.rows * entry.cols;
            let end = offset + 8 * n;
            if end > body_len {
                return Err(HstError::CheckpointChecksum);
            }
            let mut data = Vec::with_capacity(n);
            for chunk in buf[offset..end].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
            }
            params.push((entry.name.clone(), Mat::from_vec(entry.rows, entry.cols, data)));
            offset = end;
        }
        if offset != body_len {
            return Err(HstError::Checkpoint("trailing bytes after parameter data".into()));
        }
        Ok(HstCheckpoint {
            format_version: version,
            model_config: header.model_config,
            train_config: header.train_config,
            step: header.step,
            codebook_state: header.codebook_state,
            params,
            metrics: header.metrics,
        })
    }
}
