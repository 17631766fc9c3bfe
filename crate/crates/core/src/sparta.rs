//! Sparse random parameter adaptation.
//!
//! A random index set `φ` picks individual scalars out of the targeted
//! tensors; only the additive changes `Δ_φ` at those coordinates are
//! trained. Each scalar is included independently with probability `k`
//! (the density), so about `k · n_targeted` scalars end up trainable.
//!
//! Sampling runs one Bernoulli stream per tensor, keyed by the seed and the
//! tensor name, so adding or dropping a target never perturbs the
//! selection inside another tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{Bindings, ParamType, ParameterStore, TargetSet};
use crate::tensor::Scalar;

/// Largest dimension addressable by a 16-bit index.
pub const MAX_INDEXED_DIM: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub density: f64,
    pub targets: TargetSet,
    pub seed: u64,
}

impl SparsityConfig {
    pub fn new(density: f64, targets: TargetSet, seed: u64) -> Self {
        Self {
            density,
            targets,
            seed,
        }
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.density
    }

    pub fn validate(&self) -> Result<()> {
        check_density(self.density)?;
        if self.targets.is_empty() {
            return Err(Error::config("target filter is empty"));
        }
        if self.targets.contains(ParamType::Embedding) {
            return Err(Error::config("embeddings are always frozen and cannot be targeted"));
        }
        if self.targets.contains(ParamType::Head) {
            return Err(Error::config(
                "the head is trained densely and cannot be a sparse target",
            ));
        }
        Ok(())
    }
}

pub(crate) fn check_density(k: f64) -> Result<()> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::config(format!("density {k} is not in (0, 1]")));
    }
    Ok(())
}

/// Selected coordinates of one tensor, strictly increasing in row-major
/// order. `cols` is empty for 1-D tensors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub rows: Vec<u16>,
    pub cols: Vec<u16>,
}

impl IndexEntry {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row-major flat offset of the `i`-th selected coordinate.
    #[inline]
    pub fn flat(&self, i: usize) -> usize {
        if self.is_matrix() {
            self.rows[i] as usize * self.shape[1] + self.cols[i] as usize
        } else {
            self.rows[i] as usize
        }
    }

    pub fn flat_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).map(|i| self.flat(i))
    }

    fn validate(&self) -> Result<()> {
        let numel: usize = self.shape.iter().product();
        match self.shape.len() {
            1 => {
                if !self.cols.is_empty() {
                    return Err(Error::Consistency(format!(
                        "1-D tensor '{}' carries column indices",
                        self.name
                    )));
                }
            }
            2 => {
                if self.cols.len() != self.rows.len() {
                    return Err(Error::Consistency(format!(
                        "'{}' has {} rows but {} cols",
                        self.name,
                        self.rows.len(),
                        self.cols.len()
                    )));
                }
            }
            _ => {
                return Err(Error::Encoding(format!(
                    "'{}' has {} dimensions; only 1-D and 2-D tensors are indexable",
                    self.name,
                    self.shape.len()
                )))
            }
        }
        let mut prev: Option<usize> = None;
        for i in 0..self.len() {
            if self.is_matrix() && self.cols[i] as usize >= self.shape[1] {
                return Err(Error::Consistency(format!(
                    "column {} outside '{}' {:?}",
                    self.cols[i], self.name, self.shape
                )));
            }
            let f = self.flat(i);
            if f >= numel || (self.is_matrix() && self.rows[i] as usize >= self.shape[0]) {
                return Err(Error::Consistency(format!(
                    "coordinate {i} outside '{}' {:?}",
                    self.name, self.shape
                )));
            }
            if prev.is_some_and(|p| p >= f) {
                return Err(Error::Consistency(format!(
                    "coordinates of '{}' are not strictly increasing",
                    self.name
                )));
            }
            prev = Some(f);
        }
        Ok(())
    }
}

/// The index set `φ`: selected coordinates per targeted tensor.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSet {
    pub entries: Vec<IndexEntry>,
}

impl IndexSet {
    /// Total selected scalars `m`.
    pub fn count(&self) -> usize {
        self.entries.iter().map(IndexEntry::len).sum()
    }

    /// Bytes needed to store the indices as 16-bit integers.
    pub fn index_bytes(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.len() * if e.is_matrix() { 4 } else { 2 })
            .sum()
    }

    /// Checks structure and agreement with `store`.
    pub fn validate(&self, store: &ParameterStore) -> Result<()> {
        for e in &self.entries {
            let t = store.tensor(&e.name)?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Consistency(format!(
                    "index set expects '{}' with shape {:?}, model has {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            e.validate()?;
        }
        Ok(())
    }
}

/// The trainable values `Δ_φ`, aligned entry-for-entry with an [`IndexSet`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseDelta {
    pub values: Vec<Vec<f32>>,
}

impl SparseDelta {
    /// All-zero delta for `index`.
    pub fn zeros(index: &IndexSet) -> Self {
        Self {
            values: index.entries.iter().map(|e| vec![0.0; e.len()]).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn check_aligned(&self, index: &IndexSet) -> Result<()> {
        if self.values.len() != index.entries.len() {
            return Err(Error::Consistency(format!(
                "delta has {} tensors, index set has {}",
                self.values.len(),
                index.entries.len()
            )));
        }
        for (v, e) in self.values.iter().zip(&index.entries) {
            if v.len() != e.len() {
                return Err(Error::Consistency(format!(
                    "delta for '{}' has {} values for {} indices",
                    e.name,
                    v.len(),
                    e.len()
                )));
            }
            if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite delta {bad} in '{}'", e.name)));
            }
        }
        Ok(())
    }
}

/// Per-tensor random stream keyed by `(seed, tensor name)`.
pub fn tensor_stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Bernoulli(`keep`) selection over one tensor of the given shape.
pub fn bernoulli_entry(name: &str, shape: &[usize], keep: f64, seed: u64) -> Result<IndexEntry> {
    bernoulli_entry_keyed(name, name, shape, keep, seed)
}

/// Like [`bernoulli_entry`], but draws from the stream of `key` instead of `name`.
pub fn bernoulli_entry_keyed(
    name: &str,
    key: &str,
    shape: &[usize],
    keep: f64,
    seed: u64,
) -> Result<IndexEntry> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::Encoding(format!(
            "'{name}' has shape {shape:?}; only 1-D and 2-D tensors are indexable"
        )));
    }
    if let Some(&d) = shape.iter().find(|&&d| d > MAX_INDEXED_DIM) {
        return Err(Error::Encoding(format!(
            "'{name}' has a dimension of {d}, beyond the {MAX_INDEXED_DIM} addressable with 16-bit indices"
        )));
    }
    let mut rng = tensor_stream(seed, key);
    let (r, c) = if shape.len() == 2 {
        (shape[0], shape[1])
    } else {
        (shape[0], 1)
    };
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for i in 0..r {
        for j in 0..c {
            if rng.gen::<f64>() < keep {
                rows.push(i as u16);
                if shape.len() == 2 {
                    cols.push(j as u16);
                }
            }
        }
    }
    Ok(IndexEntry {
        name: name.to_string(),
        shape: shape.to_vec(),
        rows,
        cols,
    })
}

/// Samples `φ`: every scalar of every targeted tensor joins independently
/// with probability `cfg.density`.
pub fn sample_indices(store: &ParameterStore, cfg: &SparsityConfig) -> Result<IndexSet> {
    cfg.validate()?;
    let mut entries = Vec::new();
    for (name, p) in store.iter() {
        if cfg.targets.contains(p.param_type) {
            entries.push(bernoulli_entry(name, p.tensor.shape(), cfg.density, cfg.seed)?);
        }
    }
    Ok(IndexSet { entries })
}

/// Density that targets `budget` trainable scalars out of `capacity`.
pub fn density_for_budget(budget: usize, capacity: usize) -> Result<f64> {
    if budget == 0 {
        return Err(Error::config("budget must be positive"));
    }
    if budget > capacity {
        return Err(Error::config(format!(
            "budget {budget} exceeds the {capacity} scalars of the target set"
        )));
    }
    Ok(budget as f64 / capacity as f64)
}

/// Result of [`sample_for_budget`].
#[derive(Clone, Debug)]
pub struct BudgetedSample {
    pub index: IndexSet,
    pub config: SparsityConfig,
    pub attempts: u32,
}

/// Samples `φ` at density `budget / capacity`, redrawing with derived seeds
/// until the realized count is within `tolerance` (relative) of `budget`.
///
/// Conditioning the Bernoulli draw on its size keeps the selection a
/// uniformly random subset; at small capacities it removes the binomial
/// spread that would otherwise dominate count comparisons.
pub fn sample_for_budget(
    store: &ParameterStore,
    targets: &TargetSet,
    budget: usize,
    seed: u64,
    tolerance: f64,
) -> Result<BudgetedSample> {
    let capacity = store.count_params(targets);
    let density = density_for_budget(budget, capacity)?;
    const MAX_ATTEMPTS: u32 = 10_000;
    for attempt in 0..MAX_ATTEMPTS {
        let cfg = SparsityConfig::new(density, targets.clone(), derive_seed(seed, attempt));
        let index = sample_indices(store, &cfg)?;
        let m = index.count() as f64;
        if (m - budget as f64).abs() <= tolerance * budget as f64 {
            return Ok(BudgetedSample {
                index,
                config: cfg,
                attempts: attempt + 1,
            });
        }
    }
    Err(Error::config(format!(
        "no draw within {tolerance} of budget {budget} after {MAX_ATTEMPTS} attempts"
    )))
}

fn derive_seed(seed: u64, attempt: u32) -> u64 {
    if attempt == 0 {
        seed
    } else {
        seed ^ (attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

fn scatter(
    store: &mut ParameterStore,
    index: &IndexSet,
    delta: &SparseDelta,
    sign: f32,
) -> Result<()> {
    index.validate(store)?;
    delta.check_aligned(index)?;
    for (e, vals) in index.entries.iter().zip(&delta.values) {
        let data = store.tensor_mut(&e.name)?.data_mut();
        for (i, &v) in vals.iter().enumerate() {
            let f = e.flat(i);
            if sign > 0.0 {
                data[f] += v;
            } else {
                data[f] -= v;
            }
        }
    }
    Ok(())
}

/// `θ_φ ← θ_φ + Δ_φ`, in place.
pub fn merge(store: &mut ParameterStore, index: &IndexSet, delta: &SparseDelta) -> Result<()> {
    scatter(store, index, delta, 1.0)
}

/// `θ_φ ← θ_φ − Δ_φ`, in place. Plain arithmetic on parameter storage; it
/// never touches an autodiff tape.
pub fn unmerge(store: &mut ParameterStore, index: &IndexSet, delta: &SparseDelta) -> Result<()> {
    scatter(store, index, delta, -1.0)
}

/// Pre-merge values of `θ_φ`, captured by [`merge_scoped`].
#[derive(Debug)]
#[must_use = "restore the store with MergeScope::restore"]
pub struct MergeScope {
    saved: Vec<Vec<f32>>,
}

/// Merges `Δ_φ` and remembers the overwritten values so that
/// [`MergeScope::restore`] undoes the merge bit for bit. Floating-point
/// `(θ + Δ) − Δ` can differ from `θ` in the last ulp; restoring the saved
/// values keeps `θ_PT` exact across any number of training steps.
pub fn merge_scoped(
    store: &mut ParameterStore,
    index: &IndexSet,
    delta: &SparseDelta,
) -> Result<MergeScope> {
    index.validate(store)?;
    delta.check_aligned(index)?;
    let mut saved = Vec::with_capacity(index.entries.len());
    for (e, vals) in index.entries.iter().zip(&delta.values) {
        let data = store.tensor_mut(&e.name)?.data_mut();
        let mut keep = Vec::with_capacity(e.len());
        for (i, &v) in vals.iter().enumerate() {
            let f = e.flat(i);
            keep.push(data[f]);
            data[f] += v;
        }
        saved.push(keep);
    }
    Ok(MergeScope { saved })
}

impl MergeScope {
    pub fn restore(self, store: &mut ParameterStore, index: &IndexSet) -> Result<()> {
        for (e, vals) in index.entries.iter().zip(self.saved) {
            let data = store.tensor_mut(&e.name)?.data_mut();
            for (i, v) in vals.into_iter().enumerate() {
                data[e.flat(i)] = v;
            }
        }
        Ok(())
    }
}

/// Reads `∂loss/∂Δ_φ` off the dense gradients of the targeted tensors.
///
/// `Δ_φ` enters the forward pass additively through `θ_φ + Δ_φ`, so its
/// gradient is the dense gradient at the selected coordinates.
pub fn gather_grads<T: Scalar>(
    tape: &Tape<T>,
    bindings: &Bindings,
    index: &IndexSet,
) -> Result<Vec<Vec<T>>> {
    index
        .entries
        .iter()
        .map(|e| {
            let v = bindings.get(&e.name)?;
            let g = tape.grad(v).ok_or_else(|| {
                Error::State(format!("no gradient recorded for '{}'", e.name))
            })?;
            Ok(e.flat_indices().map(|f| g[f]).collect())
        })
        .collect()
}

/// A standalone checkpoint with `Δ_φ` folded into the weights.
pub fn inference_merge(
    store: &ParameterStore,
    index: &IndexSet,
    delta: &SparseDelta,
) -> Result<ParameterStore> {
    let mut out = store.clone();
    merge(&mut out, index, delta)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadInit, ModelConfig};

    fn store() -> ParameterStore {
        ParameterStore::init_pretrained(&ModelConfig::tiny(), 4)
            .unwrap()
            .swap_head(2, &HeadInit::Random { seed: 0 })
            .unwrap()
    }

    #[test]
    fn full_density_selects_everything() {
        let s = store();
        let cfg = SparsityConfig::new(1.0, TargetSet::all_sparsifiable(), 3);
        let idx = sample_indices(&s, &cfg).unwrap();
        assert_eq!(idx.count(), s.count_params(&TargetSet::all_sparsifiable()));
        idx.validate(&s).unwrap();
    }

    #[test]
    fn same_seed_same_indices() {
        let s = store();
        let cfg = SparsityConfig::new(0.1, TargetSet::all_sparsifiable(), 42);
        assert_eq!(sample_indices(&s, &cfg).unwrap(), sample_indices(&s, &cfg).unwrap());
    }

    #[test]
    fn adding_a_target_leaves_other_tensors_alone() {
        let s = store();
        let a = sample_indices(&s, &SparsityConfig::new(0.2, TargetSet::parse("Wq").unwrap(), 9))
            .unwrap();
        let b = sample_indices(
            &s,
            &SparsityConfig::new(0.2, TargetSet::parse("Wq,Wv").unwrap(), 9),
        )
        .unwrap();
        for e in &a.entries {
            assert_eq!(Some(e), b.entries.iter().find(|x| x.name == e.name));
        }
    }

    #[test]
    fn config_errors() {
        let s = store();
        let empty = SparsityConfig::new(0.1, TargetSet::default(), 0);
        assert!(matches!(sample_indices(&s, &empty), Err(Error::Config(_))));
        let emb = SparsityConfig::new(0.1, TargetSet::new([ParamType::Embedding]), 0);
        assert!(matches!(sample_indices(&s, &emb), Err(Error::Config(_))));
        let zero = SparsityConfig::new(0.0, TargetSet::all_sparsifiable(), 0);
        assert!(zero.validate().is_err());
    }

    #[test]
    fn oversized_dimension_is_an_encoding_error() {
        assert!(matches!(
            bernoulli_entry("big", &[2, MAX_INDEXED_DIM + 1], 0.1, 0),
            Err(Error::Encoding(_))
        ));
        assert!(bernoulli_entry("ok", &[1, MAX_INDEXED_DIM], 0.0, 0).is_ok());
    }

    #[test]
    fn merge_unit_update() {
        let mut s = store();
        let name = "layers.0.wq".to_string();
        s.tensor_mut(&name).unwrap().data_mut().fill(0.0);
        let idx = IndexSet {
            entries: vec![IndexEntry {
                name: name.clone(),
                shape: vec![16, 16],
                rows: vec![0],
                cols: vec![0],
            }],
        };
        let delta = SparseDelta {
            values: vec![vec![1.5]],
        };
        merge(&mut s, &idx, &delta).unwrap();
        let t = s.tensor(&name).unwrap();
        assert_eq!(t.get2(0, 0), 1.5);
        assert_eq!(t.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn misaligned_delta_is_rejected() {
        let mut s = store();
        let idx = sample_indices(&s, &SparsityConfig::new(0.5, TargetSet::parse("Wq").unwrap(), 1))
            .unwrap();
        let mut delta = SparseDelta::zeros(&idx);
        delta.values[0].pop();
        assert!(matches!(merge(&mut s, &idx, &delta), Err(Error::Consistency(_))));
    }

    #[test]
    fn scoped_merge_restores_bitwise() {
        let mut s = store();
        let before = s.clone();
        let idx = sample_indices(&s, &SparsityConfig::new(0.3, TargetSet::all_sparsifiable(), 5))
            .unwrap();
        let mut delta = SparseDelta::zeros(&idx);
        for (i, v) in delta.values.iter_mut().flatten().enumerate() {
            *v = (i as f32 * 0.37).sin() * 1e-3;
        }
        let scope = merge_scoped(&mut s, &idx, &delta).unwrap();
        assert_ne!(s, before);
        assert_eq!(s, inference_merge(&before, &idx, &delta).unwrap());
        scope.restore(&mut s, &idx).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn budget_density_arithmetic() {
        assert_eq!(density_for_budget(1000, 50_000).unwrap(), 0.02);
        assert!(density_for_budget(10, 5).is_err());
    }
}
