//! Checkpoint file format.
//!
//! A JSON header carries the model config and an ordered tensor manifest
//! (name, type, layer, shape, byte offset). Tensor payloads follow as raw
//! little-endian `f32`, each starting on a 64-byte boundary measured from
//! the payload start, which is itself 64-byte aligned in the file.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, get_f32s, put_f32s, read_container, write_container};
use crate::model::{ModelConfig, Param, ParamType, ParameterStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPRTCKPT";
pub const CHECKPOINT_ALIGN: usize = 64;
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
    payload_bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    param_type: ParamType,
    layer: Option<usize>,
    shape: Vec<usize>,
    offset: usize,
}

pub fn encode(store: &ParameterStore) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (name, p) in store.iter() {
        payload.resize(payload.len().next_multiple_of(CHECKPOINT_ALIGN), 0);
        tensors.push(ManifestEntry {
            name: name.to_string(),
            param_type: p.param_type,
            layer: p.layer,
            shape: p.tensor.shape().to_vec(),
            offset: payload.len(),
        });
        put_f32s(&mut payload, p.tensor.data());
    }
    let header = Header {
        version: FORMAT_VERSION,
        config: store.config().clone(),
        tensors,
        payload_bytes: payload.len(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    write_container(CHECKPOINT_MAGIC, &header, CHECKPOINT_ALIGN, &payload)
}

pub fn decode(bytes: &[u8]) -> Result<ParameterStore> {
    let (header, payload) = read_container(bytes, CHECKPOINT_MAGIC, CHECKPOINT_ALIGN)?;
    let header: Header = serde_json::from_slice(header)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    if payload.len() != header.payload_bytes {
        return Err(Error::format(format!(
            "payload holds {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let mut params = IndexMap::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.offset % CHECKPOINT_ALIGN != 0 {
            return Err(Error::format(format!(
                "tensor '{}' offset {} is not {CHECKPOINT_ALIGN}-byte aligned",
                e.name, e.offset
            )));
        }
        let numel: usize = e.shape.iter().product();
        let data = get_f32s(io::slice(payload, e.offset, numel * 4)?);
        let tensor = Tensor::new(e.shape, data)?;
        if params
            .insert(
                e.name.clone(),
                Param {
                    param_type: e.param_type,
                    layer: e.layer,
                    tensor,
                },
            )
            .is_some()
        {
            return Err(Error::format(format!("duplicate tensor name '{}'", e.name)));
        }
    }
    let store = ParameterStore::from_parts(header.config, params)
        .map_err(|e| Error::format(format!("checkpoint layout: {e}")))?;
    // Round trips must be bitwise; reject files with stray bytes or gaps
    // that re-encoding would not reproduce.
    if encode(&store) != bytes {
        return Err(Error::format("checkpoint is not in canonical layout"));
    }
    Ok(store)
}

pub fn save(store: &ParameterStore, path: &Path) -> Result<()> {
    io::write_atomic(path, &encode(store))
}

pub fn load(path: &Path) -> Result<ParameterStore> {
    decode(&io::read_file(path)?)
}
