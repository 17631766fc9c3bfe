//! Low-rank baselines: LoRA and a magnitude/direction DoRA variant.
//!
//! Both keep the pre-trained weight frozen and learn `B·A` per targeted
//! matrix with `A: [r × in]`, `B: [out × r]`, scaled by `α / r`. `B` starts
//! at zero so the adapted model initially equals the frozen one.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::io::{self, get_f32s, put_f32s, read_container, write_container};
use crate::model::{Bindings, ParameterStore, TargetSet};
use crate::sparta::tensor_stream;
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the `A` initialization.
pub const LORA_A_INIT_STD: f64 = 0.02;
pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 16.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraModule {
    pub name: String,
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub targets: TargetSet,
    pub modules: Vec<LoraModule>,
}

impl LoraAdapter {
    /// One module per 2-D tensor of a targeted type.
    pub fn new(
        store: &ParameterStore,
        targets: &TargetSet,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("LoRA rank must be positive"));
        }
        let mut modules = Vec::new();
        for (name, p) in store.iter() {
            if !targets.contains(p.param_type) || p.tensor.ndim() != 2 {
                continue;
            }
            let (out, inp) = (p.tensor.shape()[0], p.tensor.shape()[1]);
            if rank >= out.min(inp) {
                return Err(Error::config(format!(
                    "rank {rank} is not low-rank for '{name}' {:?}",
                    p.tensor.shape()
                )));
            }
            let mut rng = tensor_stream(seed, name);
            modules.push(LoraModule {
                name: name.to_string(),
                a: Tensor::randn(&[rank, inp], LORA_A_INIT_STD, &mut rng),
                b: Tensor::zeros(&[out, rank]),
            });
        }
        if modules.is_empty() {
            return Err(Error::config(format!("no 2-D tensors match targets {targets}")));
        }
        Ok(Self {
            rank,
            alpha,
            targets: targets.clone(),
            modules,
        })
    }

    pub fn scale(&self) -> f32 {
        (self.alpha / self.rank as f64) as f32
    }

    pub fn trainable_count(&self) -> usize {
        self.modules.iter().map(|m| m.a.numel() + m.b.numel()).sum()
    }

    /// Puts `A`/`B` on the tape and rebinds each targeted weight to
    /// `W + (α/r)·B·A`. Returns the `(A, B)` vars per module.
    pub fn bind<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        w: &mut Bindings,
        trainable: bool,
    ) -> Result<Vec<(Var, Var)>> {
        let s = <T as Scalar>::from_f32(self.scale());
        let mut out = Vec::with_capacity(self.modules.len());
        for m in &self.modules {
            let a = tape.leaf(m.a.cast(), trainable);
            let b = tape.leaf(m.b.cast(), trainable);
            let eff = lora_effective(tape, w.get(&m.name)?, a, b, s)?;
            w.insert(m.name.clone(), eff);
            out.push((a, b));
        }
        Ok(out)
    }

    /// Folds every module into a copy of `store`.
    pub fn merge_into(&self, store: &ParameterStore) -> Result<ParameterStore> {
        let mut out = store.clone();
        for m in &self.modules {
            let merged = lora_forward_weight(store.tensor(&m.name)?, m, self.scale())?;
            *out.tensor_mut(&m.name)? = merged;
        }
        Ok(out)
    }
}

fn lora_effective<T: Scalar>(tape: &mut Tape<T>, w: Var, a: Var, b: Var, s: T) -> Result<Var> {
    let ba = tape.matmul(b, a)?;
    let ba = tape.scale(ba, s)?;
    tape.add(w, ba)
}

/// `W_PT + scale · B·A`.
pub fn lora_forward_weight(w_pt: &Tensor, module: &LoraModule, scale: f32) -> Result<Tensor> {
    let r = module.a.rows();
    if r >= w_pt.rows().min(w_pt.cols()) {
        return Err(Error::config(format!(
            "rank {r} is not low-rank for shape {:?}",
            w_pt.shape()
        )));
    }
    let ba = module.b.matmul(&module.a)?;
    w_pt.add(&ba.scale(scale))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DoraLiteModule {
    pub lora: LoraModule,
    /// Per-column magnitudes, initialized to the column norms of `W_PT`.
    pub magnitude: Tensor,
}

/// LoRA plus a learned per-column magnitude:
/// `W' = m ⊙ column_normalize(W_PT + (α/r)·B·A)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DoraLiteAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub targets: TargetSet,
    pub modules: Vec<DoraLiteModule>,
}

pub fn column_norms(w: &Tensor) -> Tensor {
    let (r, c) = (w.rows(), w.cols());
    let mut n = vec![0.0f64; c];
    for i in 0..r {
        for (acc, &v) in n.iter_mut().zip(w.row(i)) {
            *acc += v as f64 * v as f64;
        }
    }
    Tensor::new(vec![c], n.into_iter().map(|v| v.sqrt() as f32).collect()).expect("shape")
}

impl DoraLiteAdapter {
    pub fn new(
        store: &ParameterStore,
        targets: &TargetSet,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        let lora = LoraAdapter::new(store, targets, rank, alpha, seed)?;
        let modules = lora
            .modules
            .into_iter()
            .map(|m| {
                let magnitude = column_norms(store.tensor(&m.name)?);
                Ok(DoraLiteModule { lora: m, magnitude })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            rank,
            alpha,
            targets: targets.clone(),
            modules,
        })
    }

    pub fn scale(&self) -> f32 {
        (self.alpha / self.rank as f64) as f32
    }

    pub fn trainable_count(&self) -> usize {
        self.modules
            .iter()
            .map(|m| m.lora.a.numel() + m.lora.b.numel() + m.magnitude.numel())
            .sum()
    }

    /// Returns `(A, B, m)` vars per module.
    pub fn bind<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        w: &mut Bindings,
        trainable: bool,
    ) -> Result<Vec<(Var, Var, Var)>> {
        let s = <T as Scalar>::from_f32(self.scale());
        let mut out = Vec::with_capacity(self.modules.len());
        for m in &self.modules {
            let a = tape.leaf(m.lora.a.cast(), trainable);
            let b = tape.leaf(m.lora.b.cast(), trainable);
            let mag = tape.leaf(m.magnitude.cast(), trainable);
            let eff = dora_effective(tape, w.get(&m.lora.name)?, a, b, mag, s)?;
            w.insert(m.lora.name.clone(), eff);
            out.push((a, b, mag));
        }
        Ok(out)
    }

    pub fn merge_into(&self, store: &ParameterStore) -> Result<ParameterStore> {
        let mut out = store.clone();
        for m in &self.modules {
            let merged = dora_lite_forward_weight(store.tensor(&m.lora.name)?, m, self.scale())?;
            *out.tensor_mut(&m.lora.name)? = merged;
        }
        Ok(out)
    }
}

fn dora_effective<T: Scalar>(
    tape: &mut Tape<T>,
    w: Var,
    a: Var,
    b: Var,
    mag: Var,
    s: T,
) -> Result<Var> {
    let v = lora_effective(tape, w, a, b, s)?;
    let dir = tape.column_normalize(v)?;
    tape.scale_cols(dir, mag)
}

/// `m ⊙ column_normalize(W_PT + scale · B·A)`.
pub fn dora_lite_forward_weight(w_pt: &Tensor, module: &DoraLiteModule, scale: f32) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let w = tape.leaf(w_pt.clone(), false);
    let a = tape.leaf(module.lora.a.clone(), false);
    let b = tape.leaf(module.lora.b.clone(), false);
    let m = tape.leaf(module.magnitude.clone(), false);
    let out = dora_effective(&mut tape, w, a, b, m, scale)?;
    Ok(tape.value(out).clone())
}

/// Model geometry for counting LoRA parameters without building a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraGeometry {
    pub layers: usize,
    pub hidden_dim: usize,
    pub kv_dim: usize,
    pub mlp_dim: usize,
}

impl LoraGeometry {
    /// gemma-2b: 18 layers, d = 2048, 256-wide k/v projections.
    pub const GEMMA_2B: Self = Self {
        layers: 18,
        hidden_dim: 2048,
        kv_dim: 256,
        mlp_dim: 16384,
    };
    /// mistral-7b: 32 layers, d = 4096, 1024-wide k/v projections.
    pub const MISTRAL_7B: Self = Self {
        layers: 32,
        hidden_dim: 4096,
        kv_dim: 1024,
        mlp_dim: 14336,
    };

    /// `layers · r · (in + out)` summed over targeted matrices. Biases and
    /// the head are not counted.
    pub fn lora_params(&self, targets: &TargetSet, rank: usize) -> usize {
        use crate::model::ParamType::*;
        let (d, kv, f) = (self.hidden_dim, self.kv_dim, self.mlp_dim);
        targets
            .iter()
            .map(|t| match t {
                Wq | Wo => d + d,
                Wk | Wv => d + kv,
                MlpGate | MlpUp | MlpDown => d + f,
                _ => 0,
            })
            .map(|io| self.layers * rank * io)
            .sum()
    }
}

pub const LORA_MAGIC: &[u8; 8] = b"SPRTLORA";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LowRankKind {
    Lora,
    DoraLite,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoraHeader {
    version: u32,
    model_fingerprint: String,
    kind: LowRankKind,
    rank: usize,
    alpha: f64,
    targets: TargetSet,
    modules: Vec<ModuleEntry>,
    dense: Vec<DenseBlock>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModuleEntry {
    name: String,
    a_shape: Vec<usize>,
    b_shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseBlock {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// LoRA / DoRA-lite adapter file: header, then per module `A`, `B` (and for
/// DoRA-lite the magnitude vector) as packed `f32` LE, then dense tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFile {
    pub model_fingerprint: String,
    pub adapter: LowRankAdapter,
    pub dense: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LowRankAdapter {
    Lora(LoraAdapter),
    DoraLite(DoraLiteAdapter),
}

impl LowRankFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut modules = Vec::new();
        let (kind, rank, alpha, targets) = match &self.adapter {
            LowRankAdapter::Lora(l) => (LowRankKind::Lora, l.rank, l.alpha, &l.targets),
            LowRankAdapter::DoraLite(d) => (LowRankKind::DoraLite, d.rank, d.alpha, &d.targets),
        };
        let mut push = |m: &LoraModule, mag: Option<&Tensor>| {
            modules.push(ModuleEntry {
                name: m.name.clone(),
                a_shape: m.a.shape().to_vec(),
                b_shape: m.b.shape().to_vec(),
                offset: payload.len(),
            });
            put_f32s(&mut payload, m.a.data());
            put_f32s(&mut payload, m.b.data());
            if let Some(mag) = mag {
                put_f32s(&mut payload, mag.data());
            }
        };
        match &self.adapter {
            LowRankAdapter::Lora(l) => l.modules.iter().for_each(|m| push(m, None)),
            LowRankAdapter::DoraLite(d) => d
                .modules
                .iter()
                .for_each(|m| push(&m.lora, Some(&m.magnitude))),
        }
        let mut dense = Vec::new();
        for (name, t) in &self.dense {
            dense.push(DenseBlock {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            put_f32s(&mut payload, t.data());
        }
        let header = LoraHeader {
            version: FORMAT_VERSION,
            model_fingerprint: self.model_fingerprint.clone(),
            kind,
            rank,
            alpha,
            targets: targets.clone(),
            modules,
            dense,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        write_container(LORA_MAGIC, &header, 1, &payload)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = read_container(bytes, LORA_MAGIC, 1)?;
        let h: LoraHeader = serde_json::from_slice(header)?;
        if h.version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported adapter version {}", h.version)));
        }
        let read = |shape: &[usize], at: usize| -> Result<(Tensor, usize)> {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.to_vec(), get_f32s(io::slice(payload, at, 4 * n)?))?;
            Ok((t, at + 4 * n))
        };
        let mut lora = Vec::new();
        let mut dora = Vec::new();
        let mut cursor = 0;
        for m in &h.modules {
            if m.offset != cursor {
                return Err(Error::format(format!("module '{}' is not packed", m.name)));
            }
            let (a, at) = read(&m.a_shape, m.offset)?;
            let (b, at) = read(&m.b_shape, at)?;
            let module = LoraModule {
                name: m.name.clone(),
                a,
                b,
            };
            cursor = match h.kind {
                LowRankKind::Lora => {
                    lora.push(module);
                    at
                }
                LowRankKind::DoraLite => {
                    let (magnitude, at) = read(&[m.a_shape[1]], at)?;
                    dora.push(DoraLiteModule {
                        lora: module,
                        magnitude,
                    });
                    at
                }
            };
        }
        let mut dense = Vec::new();
        for d in &h.dense {
            if d.offset != cursor {
                return Err(Error::format(format!("dense tensor '{}' is not packed", d.name)));
            }
            let (t, at) = read(&d.shape, d.offset)?;
            dense.push((d.name.clone(), t));
            cursor = at;
        }
        if cursor != payload.len() {
            return Err(Error::format("trailing bytes after adapter payload"));
        }
        let adapter = match h.kind {
            LowRankKind::Lora => LowRankAdapter::Lora(LoraAdapter {
                rank: h.rank,
                alpha: h.alpha,
                targets: h.targets,
                modules: lora,
            }),
            LowRankKind::DoraLite => LowRankAdapter::DoraLite(DoraLiteAdapter {
                rank: h.rank,
                alpha: h.alpha,
                targets: h.targets,
                modules: dora,
            }),
        };
        Ok(Self {
            model_fingerprint: h.model_fingerprint,
            adapter,
            dense,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&io::read_file(path)?)
    }

    /// Base weights with dense tensors swapped in and the low-rank updates
    /// folded into the targeted matrices.
    pub fn apply(&self, base: &ParameterStore) -> Result<ParameterStore> {
        if base.fingerprint() != self.model_fingerprint {
            return Err(Error::Pairing("adapter was built for a different base model".into()));
        }
        let mut with_dense = base.clone();
        for (name, t) in &self.dense {
            *with_dense.tensor_mut(name)? = t.clone();
        }
        match &self.adapter {
            LowRankAdapter::Lora(l) => l.merge_into(&with_dense),
            LowRankAdapter::DoraLite(d) => d.merge_into(&with_dense),
        }
    }
}
