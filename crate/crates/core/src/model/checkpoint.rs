//! "PCPT" tensor container: magic, format version, JSON header (metadata
//! and table of contents), then little-endian tensor data.

use std::fs;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::state::{DType, LoraState, ModelConfig, ModelState, Param, Proj, Storage};
use crate::error::{Error, Result};
use crate::lora::LoraConfig;

pub const MAGIC: &[u8; 4] = b"PCPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TocEntry {
    pub path: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    toc: Vec<TocEntry>,
}

pub fn encode_container(meta: &Value, tensors: &[Param]) -> Result<Vec<u8>> {
    let mut toc = Vec::with_capacity(tensors.len());
    let mut data = Vec::new();
    for t in tensors {
        toc.push(TocEntry {
            path: t.path.clone(),
            dtype: t.data.dtype(),
            shape: t.shape.clone(),
            offset: data.len() as u64,
        });
        data.extend(t.data.le_bytes());
    }
    let header = serde_json::to_vec(&Header { meta: meta.clone(), toc })?;
    let mut out = Vec::with_capacity(12 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<(Value, Vec<Param>)> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing PCPT magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    let data = &bytes[12 + hlen..];
    let mut tensors = Vec::with_capacity(header.toc.len());
    for e in header.toc {
        let n: usize = e.shape.iter().product();
        let width = match e.dtype {
            DType::F16 => 2,
            DType::F32 => 4,
        };
        let start = e.offset as usize;
        let raw = data
            .get(start..start + n * width)
            .ok_or_else(|| Error::Format(format!("tensor {} out of bounds", e.path)))?;
        let storage = match e.dtype {
            DType::F16 => Storage::F16(raw.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]])).collect()),
            DType::F32 => Storage::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        };
        tensors.push(Param { path: e.path, shape: e.shape, data: storage });
    }
    Ok((header.meta, tensors))
}

pub fn write_container(path: &Path, meta: &Value, tensors: &[Param]) -> Result<()> {
    let bytes = encode_container(meta, tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<(Value, Vec<Param>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: ModelConfig,
    lora: Option<LoraMeta>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct LoraMeta {
    pub config: LoraConfig,
    /// `(layer, projection)` per adapter pair, in tensor order.
    pub hosts: Vec<(usize, Proj)>,
}

impl LoraMeta {
    pub(crate) fn from_state(l: &LoraState) -> Self {
        LoraMeta { config: l.cfg.clone(), hosts: l.slots.iter().map(|s| (s.layer, s.proj)).collect() }
    }
}

pub fn save_model(state: &ModelState, path: &Path) -> Result<()> {
    let meta = ModelMeta {
        kind: "model".into(),
        config: state.cfg,
        lora: state.lora.as_ref().map(LoraMeta::from_state),
    };
    write_container(path, &serde_json::to_value(meta)?, &state.params)
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let (meta, tensors) = read_container(path)?;
    let meta: ModelMeta = serde_json::from_value(meta)?;
    if meta.kind != "model" {
        return Err(Error::Format(format!("{} holds a {} checkpoint", path.display(), meta.kind)));
    }
    let n_base = super::state::base_len(meta.config.n_layers);
    let lora = match meta.lora {
        None => None,
        Some(l) => Some(crate::lora::slots_for(&meta.config, &l.config, &l.hosts, n_base)?),
    };
    ModelState::from_parts(meta.config, tensors, lora)
}
