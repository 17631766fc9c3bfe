//! Sparse-delta file format.
//!
//! JSON header (base-model fingerprint, density, sparsity, seed, targets,
//! mode, value width, per-tensor manifest) followed by a packed payload.
//! In explicit mode each tensor contributes `m_t` row indices (`u16` LE),
//! `m_t` column indices (`u16` LE, 2-D tensors only) and `m_t` values. In
//! seed-derived mode the indices are omitted and regenerated from
//! `(seed, density, targets)` against the base model.
//!
//! Dense tensors, such as a trained classification head, may follow as
//! plain `f32` blocks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, get_f32s, get_u16s, put_f32s, put_u16s, read_container, write_container};
use crate::model::{ParameterStore, TargetSet};
use crate::sparta::{sample_indices, IndexEntry, IndexSet, SparseDelta, SparsityConfig};
use crate::tensor::Tensor;

pub const DELTA_MAGIC: &[u8; 8] = b"SPRTDLTA";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexMode {
    Explicit,
    SeedDerived,
}

/// Storage width of delta values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueDtype {
    F32,
    Bf16,
}

impl ValueDtype {
    pub fn bytes(self) -> usize {
        match self {
            ValueDtype::F32 => 4,
            ValueDtype::Bf16 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    model_fingerprint: String,
    density: f64,
    sparsity: f64,
    seed: u64,
    targets: TargetSet,
    mode: IndexMode,
    value_dtype: ValueDtype,
    tensors: Vec<TensorEntry>,
    dense: Vec<DenseEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    count: usize,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// In-memory form of a sparse-delta file.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaFile {
    pub model_fingerprint: String,
    pub sparsity: SparsityConfig,
    pub mode: IndexMode,
    pub value_dtype: ValueDtype,
    pub index: IndexSet,
    pub delta: SparseDelta,
    /// Densely stored tensors that replace their base counterparts.
    pub dense: Vec<(String, Tensor)>,
}

/// Parsed file whose indices may still need regenerating.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDeltaFile {
    pub model_fingerprint: String,
    pub sparsity: SparsityConfig,
    pub mode: IndexMode,
    pub value_dtype: ValueDtype,
    /// Present in explicit mode only.
    pub index: Option<IndexSet>,
    names: Vec<(String, Vec<usize>)>,
    pub delta: SparseDelta,
    pub dense: Vec<(String, Tensor)>,
}

fn entry_bytes(e: &IndexEntry, mode: IndexMode, dtype: ValueDtype) -> usize {
    let idx = match mode {
        IndexMode::Explicit if e.is_matrix() => 4,
        IndexMode::Explicit => 2,
        IndexMode::SeedDerived => 0,
    };
    e.len() * (idx + dtype.bytes())
}

impl DeltaFile {
    /// Bytes taken by indices and values, excluding header and dense blocks.
    pub fn sparse_payload_bytes(&self) -> usize {
        self.index
            .entries
            .iter()
            .map(|e| entry_bytes(e, self.mode, self.value_dtype))
            .sum()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.delta.check_aligned(&self.index)?;
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.index.entries.len());
        for (e, vals) in self.index.entries.iter().zip(&self.delta.values) {
            tensors.push(TensorEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                count: e.len(),
                offset: payload.len(),
            });
            if self.mode == IndexMode::Explicit {
                put_u16s(&mut payload, &e.rows);
                put_u16s(&mut payload, &e.cols);
            }
            match self.value_dtype {
                ValueDtype::F32 => put_f32s(&mut payload, vals),
                ValueDtype::Bf16 => {
                    for &v in vals {
                        payload.extend_from_slice(&half::bf16::from_f32(v).to_le_bytes());
                    }
                }
            }
        }
        let mut dense = Vec::with_capacity(self.dense.len());
        for (name, t) in &self.dense {
            dense.push(DenseEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            put_f32s(&mut payload, t.data());
        }
        let header = Header {
            version: FORMAT_VERSION,
            model_fingerprint: self.model_fingerprint.clone(),
            density: self.sparsity.density,
            sparsity: self.sparsity.sparsity(),
            seed: self.sparsity.seed,
            targets: self.sparsity.targets.clone(),
            mode: self.mode,
            value_dtype: self.value_dtype,
            tensors,
            dense,
        };
        let header = serde_json::to_vec(&header)?;
        Ok(write_container(DELTA_MAGIC, &header, 1, &payload))
    }

    /// Decodes a file, regenerating seed-derived indices against `base`.
    pub fn decode(bytes: &[u8], base: Option<&ParameterStore>) -> Result<Self> {
        RawDeltaFile::decode(bytes)?.resolve(base)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path, base: Option<&ParameterStore>) -> Result<Self> {
        Self::decode(&io::read_file(path)?, base)
    }

    /// Confirms this delta was produced against `store`.
    pub fn check_base(&self, store: &ParameterStore) -> Result<()> {
        let fp = store.fingerprint();
        if fp != self.model_fingerprint {
            return Err(Error::Pairing(format!(
                "delta was built for model {}, got {}",
                short(&self.model_fingerprint),
                short(&fp)
            )));
        }
        self.index.validate(store)
    }

    /// Base weights with the dense tensors swapped in and `Δ_φ` merged.
    pub fn apply(&self, base: &ParameterStore) -> Result<ParameterStore> {
        self.check_base(base)?;
        let mut out = self.with_dense(base)?;
        crate::sparta::merge(&mut out, &self.index, &self.delta)?;
        Ok(out)
    }

    /// Base weights with only the dense tensors swapped in.
    pub fn with_dense(&self, base: &ParameterStore) -> Result<ParameterStore> {
        let mut out = base.clone();
        for (name, t) in &self.dense {
            let slot = out.tensor_mut(name)?;
            if slot.shape() != t.shape() {
                return Err(Error::Consistency(format!(
                    "dense tensor '{name}' has shape {:?}, model has {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(out)
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

impl RawDeltaFile {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = read_container(bytes, DELTA_MAGIC, 1)?;
        let h: Header = serde_json::from_slice(header)?;
        if h.version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported delta version {}", h.version)));
        }
        let w = h.value_dtype.bytes();
        let mut entries = Vec::with_capacity(h.tensors.len());
        let mut values = Vec::with_capacity(h.tensors.len());
        let mut cursor = 0;
        for t in &h.tensors {
            if t.offset != cursor {
                return Err(Error::format(format!("tensor '{}' is not packed", t.name)));
            }
            let matrix = t.shape.len() == 2;
            let mut at = t.offset;
            if h.mode == IndexMode::Explicit {
                let rows = get_u16s(io::slice(payload, at, 2 * t.count)?);
                at += 2 * t.count;
                let cols = if matrix {
                    let c = get_u16s(io::slice(payload, at, 2 * t.count)?);
                    at += 2 * t.count;
                    c
                } else {
                    Vec::new()
                };
                entries.push(IndexEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    rows,
                    cols,
                });
            }
            let raw = io::slice(payload, at, w * t.count)?;
            values.push(match h.value_dtype {
                ValueDtype::F32 => get_f32s(raw),
                ValueDtype::Bf16 => raw
                    .chunks_exact(2)
                    .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                    .collect(),
            });
            cursor = at + w * t.count;
        }
        let mut dense = Vec::with_capacity(h.dense.len());
        for d in &h.dense {
            if d.offset != cursor {
                return Err(Error::format(format!("dense tensor '{}' is not packed", d.name)));
            }
            let numel: usize = d.shape.iter().product();
            let data = get_f32s(io::slice(payload, d.offset, 4 * numel)?);
            dense.push((d.name.clone(), Tensor::new(d.shape.clone(), data)?));
            cursor += 4 * numel;
        }
        if cursor != payload.len() {
            return Err(Error::format(format!(
                "{} trailing payload bytes",
                payload.len() - cursor
            )));
        }
        let index = (h.mode == IndexMode::Explicit).then_some(IndexSet { entries });
        Ok(Self {
            model_fingerprint: h.model_fingerprint,
            sparsity: SparsityConfig::new(h.density, h.targets, h.seed),
            mode: h.mode,
            value_dtype: h.value_dtype,
            index,
            names: h.tensors.into_iter().map(|t| (t.name, t.shape)).collect(),
            delta: SparseDelta { values },
            dense,
        })
    }

    /// Fills in indices. Seed-derived files need the base model they were
    /// sampled from.
    pub fn resolve(self, base: Option<&ParameterStore>) -> Result<DeltaFile> {
        let index = match self.index {
            Some(ix) => ix,
            None => {
                let base = base.ok_or_else(|| {
                    Error::config("a seed-derived delta needs its base model to rebuild indices")
                })?;
                let ix = sample_indices(base, &self.sparsity)?;
                let got: Vec<(&str, &[usize])> = ix
                    .entries
                    .iter()
                    .map(|e| (e.name.as_str(), e.shape.as_slice()))
                    .collect();
                let want: Vec<(&str, &[usize])> = self
                    .names
                    .iter()
                    .map(|(n, s)| (n.as_str(), s.as_slice()))
                    .collect();
                if got != want {
                    return Err(Error::Pairing(
                        "regenerated index set does not match the file's tensor list".into(),
                    ));
                }
                ix
            }
        };
        self.delta.check_aligned(&index)?;
        Ok(DeltaFile {
            model_fingerprint: self.model_fingerprint,
            sparsity: self.sparsity,
            mode: self.mode,
            value_dtype: self.value_dtype,
            index,
            delta: self.delta,
            dense: self.dense,
        })
    }
}
