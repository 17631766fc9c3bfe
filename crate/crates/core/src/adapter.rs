//! Adapter specifications and the trainable model wrapper shared by every
//! method.
//!
//! An [`AdaptedModel`] owns a copy of the base weights plus the method's
//! trainable state, and exposes that state to the optimizer as an ordered
//! list of flat segments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::baselines::{
    DoraLiteAdapter, LoraAdapter, LowRankAdapter, LowRankFile, DEFAULT_ALPHA, DEFAULT_RANK, LORA_MAGIC,
};
use crate::checkpoint::{self, CHECKPOINT_MAGIC};
use crate::delta_file::{DeltaFile, IndexMode, ValueDtype, DELTA_MAGIC};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{
    bind_store, forward, Bindings, DropoutCtx, ParamType, ParameterStore, TargetSet, TokenBatch, HEAD,
};
use crate::sparta::{
    gather_grads, inference_merge, merge_scoped, sample_for_budget, sample_indices, IndexSet,
    SparseDelta, SparsityConfig,
};
use crate::tensor::Tensor;

/// Relative tolerance on realized trainable counts when a budget is given.
pub const BUDGET_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AdapterSpec {
    /// Random sparse deltas. Exactly one of `density` and `budget` is set.
    Sparta {
        #[serde(default)]
        density: Option<f64>,
        #[serde(default)]
        budget: Option<usize>,
        targets: TargetSet,
        seed: u64,
    },
    Lora {
        rank: usize,
        alpha: f64,
        targets: TargetSet,
        seed: u64,
    },
    DoraLite {
        rank: usize,
        alpha: f64,
        targets: TargetSet,
        seed: u64,
    },
    Full {
        #[serde(default)]
        freeze_embeddings: bool,
    },
    HeadOnly,
}

pub fn head_only_spec() -> AdapterSpec {
    AdapterSpec::HeadOnly
}

pub fn full_ft_spec() -> AdapterSpec {
    AdapterSpec::Full {
        freeze_embeddings: false,
    }
}

pub fn sparta_spec(density: f64, seed: u64) -> AdapterSpec {
    AdapterSpec::Sparta {
        density: Some(density),
        budget: None,
        targets: TargetSet::all_sparsifiable(),
        seed,
    }
}

pub fn lora_spec(seed: u64) -> AdapterSpec {
    AdapterSpec::Lora {
        rank: DEFAULT_RANK,
        alpha: DEFAULT_ALPHA,
        targets: TargetSet::new([ParamType::Wq, ParamType::Wv]),
        seed,
    }
}

impl AdapterSpec {
    pub fn method_name(&self) -> &'static str {
        match self {
            AdapterSpec::Sparta { .. } => "sparta",
            AdapterSpec::Lora { .. } => "lora",
            AdapterSpec::DoraLite { .. } => "dora-lite",
            AdapterSpec::Full { .. } => "full",
            AdapterSpec::HeadOnly => "head-only",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    Sparta {
        config: SparsityConfig,
        index: IndexSet,
        delta: SparseDelta,
    },
    Lora(LoraAdapter),
    DoraLite(DoraLiteAdapter),
    /// Full and head-only: training updates `dense` tensors in place.
    Dense,
}

/// Base weights plus a method's trainable state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel {
    spec: AdapterSpec,
    base_fingerprint: String,
    store: ParameterStore,
    kind: Kind,
    /// Tensors of `store` that are trained densely, in segment order.
    dense: Vec<String>,
}

impl AdaptedModel {
    pub fn new(base: &ParameterStore, spec: &AdapterSpec) -> Result<Self> {
        let head_only = vec![HEAD.to_string()];
        let (kind, dense) = match spec {
            AdapterSpec::Sparta {
                density,
                budget,
                targets,
                seed,
            } => {
                let (config, index) = match (density, budget) {
                    (Some(k), None) => {
                        let cfg = SparsityConfig::new(*k, targets.clone(), *seed);
                        let idx = sample_indices(base, &cfg)?;
                        (cfg, idx)
                    }
                    (None, Some(b)) => {
                        let s = sample_for_budget(base, targets, *b, *seed, BUDGET_TOLERANCE)?;
                        (s.config, s.index)
                    }
                    _ => {
                        return Err(Error::config(
                            "sparta needs exactly one of density and budget",
                        ))
                    }
                };
                config.validate()?;
                let delta = SparseDelta::zeros(&index);
                (
                    Kind::Sparta {
                        config,
                        index,
                        delta,
                    },
                    head_only,
                )
            }
            AdapterSpec::Lora {
                rank,
                alpha,
                targets,
                seed,
            } => {
                check_lowrank_targets(targets)?;
                let a = LoraAdapter::new(base, targets, *rank, *alpha, *seed)?;
                (Kind::Lora(a), head_only)
            }
            AdapterSpec::DoraLite {
                rank,
                alpha,
                targets,
                seed,
            } => {
                check_lowrank_targets(targets)?;
                let a = DoraLiteAdapter::new(base, targets, *rank, *alpha, *seed)?;
                (Kind::DoraLite(a), head_only)
            }
            AdapterSpec::Full { freeze_embeddings } => {
                let names = base
                    .iter()
                    .filter(|(_, p)| !(*freeze_embeddings && p.param_type == ParamType::Embedding))
                    .map(|(n, _)| n.to_string())
                    .collect();
                (Kind::Dense, names)
            }
            AdapterSpec::HeadOnly => (Kind::Dense, head_only),
        };
        Ok(Self {
            spec: spec.clone(),
            base_fingerprint: base.fingerprint(),
            store: base.clone(),
            kind,
            dense,
        })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    /// Working weights. For sparse and low-rank methods this is the base
    /// model with only the densely trained tensors (the head) updated.
    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn base_fingerprint(&self) -> &str {
        &self.base_fingerprint
    }

    pub fn index(&self) -> Option<&IndexSet> {
        match &self.kind {
            Kind::Sparta { index, .. } => Some(index),
            _ => None,
        }
    }

    pub fn delta(&self) -> Option<&SparseDelta> {
        match &self.kind {
            Kind::Sparta { delta, .. } => Some(delta),
            _ => None,
        }
    }

    pub fn sparsity_config(&self) -> Option<&SparsityConfig> {
        match &self.kind {
            Kind::Sparta { config, .. } => Some(config),
            _ => None,
        }
    }

    /// Names of densely trained tensors.
    pub fn dense_names(&self) -> &[String] {
        &self.dense
    }

    /// Trainable scalars excluding densely trained tensors.
    pub fn adapter_count(&self) -> usize {
        match &self.kind {
            Kind::Sparta { index, .. } => index.count(),
            Kind::Lora(a) => a.trainable_count(),
            Kind::DoraLite(a) => a.trainable_count(),
            Kind::Dense => 0,
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.segment_sizes().iter().sum()
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = match &self.kind {
            Kind::Sparta { delta, .. } => delta.values.iter().map(Vec::len).collect(),
            Kind::Lora(a) => a
                .modules
                .iter()
                .flat_map(|m| [m.a.numel(), m.b.numel()])
                .collect(),
            Kind::DoraLite(a) => a
                .modules
                .iter()
                .flat_map(|m| [m.lora.a.numel(), m.lora.b.numel(), m.magnitude.numel()])
                .collect(),
            Kind::Dense => Vec::new(),
        };
        for n in &self.dense {
            out.push(self.store.tensor(n).map(Tensor::numel).unwrap_or(0));
        }
        out
    }

    /// Mutable views of every trainable segment, aligned with
    /// [`AdaptedModel::segment_sizes`].
    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = match &mut self.kind {
            Kind::Sparta { delta, .. } => delta.values.iter_mut().map(Vec::as_mut_slice).collect(),
            Kind::Lora(a) => a
                .modules
                .iter_mut()
                .flat_map(|m| [m.a.data_mut(), m.b.data_mut()])
                .collect(),
            Kind::DoraLite(a) => a
                .modules
                .iter_mut()
                .flat_map(|m| {
                    [
                        m.lora.a.data_mut(),
                        m.lora.b.data_mut(),
                        m.magnitude.data_mut(),
                    ]
                })
                .collect(),
            Kind::Dense => Vec::new(),
        };
        // Each dense name is distinct, so the borrows are disjoint; the store
        // hands them out one tensor at a time.
        let dense: Vec<&str> = self.dense.iter().map(String::as_str).collect();
        out.extend(self.store.tensors_mut(&dense));
        out
    }

    pub fn snapshot(&self) -> Vec<Vec<f32>> {
        let mut me = self.clone();
        me.params_mut().into_iter().map(|s| s.to_vec()).collect()
    }

    pub fn restore_snapshot(&mut self, snap: &[Vec<f32>]) -> Result<()> {
        let mut segs = self.params_mut();
        if segs.len() != snap.len() {
            return Err(Error::Consistency("snapshot does not match the model".into()));
        }
        for (dst, src) in segs.iter_mut().zip(snap) {
            if dst.len() != src.len() {
                return Err(Error::Consistency("snapshot does not match the model".into()));
            }
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    /// One training pass: loss and gradients for every segment.
    ///
    /// For sparse adapters this is merge, forward, backward, then restoring
    /// the merged coordinates; the restore is plain storage writes outside
    /// the tape.
    pub fn loss_and_grads(
        &mut self,
        batch: &TokenBatch,
        labels: &[usize],
        dropout: Option<&mut DropoutCtx>,
    ) -> Result<(f64, Vec<Vec<f32>>)> {
        let Self {
            store, kind, dense, ..
        } = self;
        let scope = match &*kind {
            Kind::Sparta { index, delta, .. } => Some(merge_scoped(store, index, delta)?),
            _ => None,
        };
        let result = backprop(kind, dense, store, batch, labels, dropout);
        if let (Some(scope), Kind::Sparta { index, .. }) = (scope, &*kind) {
            scope.restore(store, index)?;
        }
        result
    }

    /// Logits through the adapter path (bracketed merge for sparse deltas,
    /// on-the-fly low-rank updates otherwise).
    pub fn logits(&mut self, batch: &TokenBatch) -> Result<Tensor> {
        let Self {
            store, kind, dense, ..
        } = self;
        let scope = match &*kind {
            Kind::Sparta { index, delta, .. } => Some(merge_scoped(store, index, delta)?),
            _ => None,
        };
        let result = (|| {
            let mut tape = Tape::<f32>::new();
            let (logits, _, _) = build(kind, dense, &mut tape, store, batch, None, false)?;
            Ok(tape.value(logits).clone())
        })();
        if let (Some(scope), Kind::Sparta { index, .. }) = (scope, &*kind) {
            scope.restore(store, index)?;
        }
        result
    }

    /// A standalone checkpoint with the adaptation folded in.
    pub fn merged(&self) -> Result<ParameterStore> {
        match &self.kind {
            Kind::Sparta { index, delta, .. } => inference_merge(&self.store, index, delta),
            Kind::Lora(a) => a.merge_into(&self.store),
            Kind::DoraLite(a) => a.merge_into(&self.store),
            Kind::Dense => Ok(self.store.clone()),
        }
    }

    /// The file-level form of the trained adaptation.
    pub fn artifact(&self) -> Result<Artifact> {
        let dense = self
            .dense
            .iter()
            .map(|n| Ok((n.clone(), self.store.tensor(n)?.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(match &self.kind {
            Kind::Sparta {
                config,
                index,
                delta,
            } => Artifact::Delta(DeltaFile {
                model_fingerprint: self.base_fingerprint.clone(),
                sparsity: config.clone(),
                mode: IndexMode::Explicit,
                value_dtype: ValueDtype::F32,
                index: index.clone(),
                delta: delta.clone(),
                dense,
            }),
            Kind::Lora(a) => Artifact::LowRank(LowRankFile {
                model_fingerprint: self.base_fingerprint.clone(),
                adapter: LowRankAdapter::Lora(a.clone()),
                dense,
            }),
            Kind::DoraLite(a) => Artifact::LowRank(LowRankFile {
                model_fingerprint: self.base_fingerprint.clone(),
                adapter: LowRankAdapter::DoraLite(a.clone()),
                dense,
            }),
            Kind::Dense => Artifact::Checkpoint(self.store.clone()),
        })
    }
}

/// Runs the adapted forward pass on `tape`. Returns logits, the bindings
/// and the low-rank vars whose gradients feed the optimizer.
fn build(
    kind: &Kind,
    dense: &[String],
    tape: &mut Tape<f32>,
    store: &ParameterStore,
    batch: &TokenBatch,
    dropout: Option<&mut DropoutCtx>,
    trainable: bool,
) -> Result<(Var, Bindings, Vec<Var>)> {
    let sparse_targets = match kind {
        Kind::Sparta { config, .. } => Some(&config.targets),
        _ => None,
    };
    let mut w = bind_store(tape, store, |name, p| {
        trainable
            && (dense.iter().any(|d| d == name)
                || sparse_targets.is_some_and(|t| t.contains(p.param_type)))
    });
    let mut vars = Vec::new();
    match kind {
        Kind::Lora(a) => {
            for (va, vb) in a.bind(tape, &mut w, trainable)? {
                vars.extend([va, vb]);
            }
        }
        Kind::DoraLite(a) => {
            for (va, vb, vm) in a.bind(tape, &mut w, trainable)? {
                vars.extend([va, vb, vm]);
            }
        }
        Kind::Sparta { .. } | Kind::Dense => {}
    }
    let logits = forward(tape, store.config(), &w, batch, dropout)?;
    Ok((logits, w, vars))
}

fn backprop(
    kind: &Kind,
    dense: &[String],
    store: &ParameterStore,
    batch: &TokenBatch,
    labels: &[usize],
    dropout: Option<&mut DropoutCtx>,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let (logits, w, vars) = build(kind, dense, &mut tape, store, batch, dropout, true)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let loss_value = tape.value(loss).data()[0] as f64;
    tape.backward(loss)?;
    let mut grads = match kind {
        Kind::Sparta { index, .. } => gather_grads(&tape, &w, index)?,
        _ => vars
            .iter()
            .map(|&v| grad_of(&tape, v, "adapter"))
            .collect::<Result<_>>()?,
    };
    for name in dense {
        grads.push(grad_of(&tape, w.get(name)?, name)?);
    }
    Ok((loss_value, grads))
}

fn check_lowrank_targets(targets: &TargetSet) -> Result<()> {
    if targets.contains(ParamType::Embedding) || targets.contains(ParamType::Head) {
        return Err(Error::config(
            "low-rank adapters cannot target the embedding table or the head",
        ));
    }
    Ok(())
}

fn grad_of(tape: &Tape<f32>, v: Var, what: &str) -> Result<Vec<f32>> {
    tape.grad(v)
        .map(<[f32]>::to_vec)
        .ok_or_else(|| Error::State(format!("no gradient recorded for '{what}'")))
}

/// Any trained adaptation as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Artifact {
    Delta(DeltaFile),
    LowRank(LowRankFile),
    Checkpoint(ParameterStore),
}

impl Artifact {
    pub fn encode(&self) -> Result<Vec<u8>> {
        Ok(match self {
            Artifact::Delta(d) => d.encode()?,
            Artifact::LowRank(l) => l.encode(),
            Artifact::Checkpoint(s) => checkpoint::encode(s),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.encode()?)
    }

    /// Detects the file type by its magic. Seed-derived delta files need
    /// `base` to regenerate their indices.
    pub fn decode(bytes: &[u8], base: Option<&ParameterStore>) -> Result<Self> {
        let magic = bytes.get(..8).unwrap_or_default();
        if magic == DELTA_MAGIC {
            Ok(Artifact::Delta(DeltaFile::decode(bytes, base)?))
        } else if magic == LORA_MAGIC {
            Ok(Artifact::LowRank(LowRankFile::decode(bytes)?))
        } else if magic == CHECKPOINT_MAGIC {
            Ok(Artifact::Checkpoint(checkpoint::decode(bytes)?))
        } else {
            Err(Error::format("unrecognized artifact file"))
        }
    }

    pub fn load(path: &Path, base: Option<&ParameterStore>) -> Result<Self> {
        Self::decode(&io::read_file(path)?, base)
    }

    /// Standalone weights: the base with the adaptation applied, or the
    /// checkpoint itself.
    pub fn apply(&self, base: &ParameterStore) -> Result<ParameterStore> {
        match self {
            Artifact::Delta(d) => d.apply(base),
            Artifact::LowRank(l) => l.apply(base),
            Artifact::Checkpoint(s) => Ok(s.clone()),
        }
    }
}
