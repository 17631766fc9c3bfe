//! Miniature decoder-only transformer with a swappable classification head.
//!
//! Layout follows the usual pre-norm decoder recipe: learned token and
//! position embeddings, multi-head causal attention with separate q/k/v/o
//! projections, a SwiGLU MLP (gate/up/down) and RMS normalization. Weight
//! matrices are stored `[out × in]`, so a projection is `x · Wᵀ`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Reserved padding token id.
pub const PAD_ID: usize = 0;

/// Standard deviation of a randomly initialized classification head.
pub const HEAD_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamType {
    Embedding,
    Wq,
    Wk,
    Wv,
    Wo,
    MlpGate,
    MlpUp,
    MlpDown,
    Norm,
    Head,
}

impl ParamType {
    pub const ALL: [ParamType; 10] = [
        ParamType::Embedding,
        ParamType::Wq,
        ParamType::Wk,
        ParamType::Wv,
        ParamType::Wo,
        ParamType::MlpGate,
        ParamType::MlpUp,
        ParamType::MlpDown,
        ParamType::Norm,
        ParamType::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamType::Embedding => "Embedding",
            ParamType::Wq => "Wq",
            ParamType::Wk => "Wk",
            ParamType::Wv => "Wv",
            ParamType::Wo => "Wo",
            ParamType::MlpGate => "MlpGate",
            ParamType::MlpUp => "MlpUp",
            ParamType::MlpDown => "MlpDown",
            ParamType::Norm => "Norm",
            ParamType::Head => "Head",
        }
    }
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown parameter type '{s}'")))
    }
}

/// A set of parameter types, e.g. the tensors an adapter targets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TargetSet(pub BTreeSet<ParamType>);

impl TargetSet {
    pub fn new(types: impl IntoIterator<Item = ParamType>) -> Self {
        Self(types.into_iter().collect())
    }

    /// Every type except the embedding table and the head.
    pub fn all_sparsifiable() -> Self {
        Self::new(
            ParamType::ALL
                .into_iter()
                .filter(|t| !matches!(t, ParamType::Embedding | ParamType::Head)),
        )
    }

    pub fn everything() -> Self {
        Self::new(ParamType::ALL)
    }

    pub fn contains(&self, t: ParamType) -> bool {
        self.0.contains(&t)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ParamType> + '_ {
        self.0.iter().copied()
    }

    /// Parses a comma-separated list. Besides the type names this accepts
    /// `MLP` (gate, up, down), `W` or `attn` (q, k, v, o), `norm` and `all`
    /// (every sparsifiable type).
    pub fn parse(spec: &str) -> Result<Self> {
        let mut out = BTreeSet::new();
        for raw in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match raw.to_ascii_lowercase().as_str() {
                "all" => out.extend(Self::all_sparsifiable().0),
                "mlp" => out.extend([ParamType::MlpGate, ParamType::MlpUp, ParamType::MlpDown]),
                "w" | "attn" => {
                    out.extend([ParamType::Wq, ParamType::Wk, ParamType::Wv, ParamType::Wo])
                }
                _ => {
                    out.insert(raw.parse::<ParamType>()?);
                }
            }
        }
        Ok(Self(out))
    }
}

impl fmt::Display for TargetSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|t| t.as_str()).collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Key/value heads; fewer than `num_heads` gives grouped-query attention.
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub max_seq_len: usize,
    /// Rows of the output head: `vocab_size` for a language-model head,
    /// the class count after a head swap.
    pub num_classes: usize,
}

impl ModelConfig {
    /// The small configuration used throughout the test suites.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 64,
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            num_kv_heads: 2,
            head_dim: 8,
            mlp_dim: 32,
            max_seq_len: 32,
            num_classes: 64,
        }
    }

    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("mlp_dim", self.mlp_dim),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.hidden_dim != self.num_heads * self.head_dim {
            return Err(Error::config(format!(
                "hidden_dim {} != num_heads {} x head_dim {}",
                self.hidden_dim, self.num_heads, self.head_dim
            )));
        }
        if self.num_heads % self.num_kv_heads != 0 {
            return Err(Error::config(format!(
                "num_heads {} is not a multiple of num_kv_heads {}",
                self.num_heads, self.num_kv_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub param_type: ParamType,
    pub layer: Option<usize>,
    pub tensor: Tensor<f32>,
}

/// Named model tensors in a stable order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    config: ModelConfig,
    params: IndexMap<String, Param>,
}

pub fn layer_name(layer: usize, suffix: &str) -> String {
    format!("layers.{layer}.{suffix}")
}

pub const EMBED: &str = "embed";
pub const FINAL_NORM: &str = "final_norm";
pub const HEAD: &str = "head";

impl ParameterStore {
    /// Assembles a store from parts, checking the structural invariants.
    pub fn from_parts(config: ModelConfig, params: IndexMap<String, Param>) -> Result<Self> {
        config.validate()?;
        let store = Self { config, params };
        store.check_layout()?;
        Ok(store)
    }

    /// A freshly initialized stand-in for a pre-trained model, with an
    /// untied vocabulary head (`num_classes == vocab_size`).
    pub fn init_pretrained(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut config = config.clone();
        config.num_classes = config.vocab_size;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, kv, f) = (config.hidden_dim, config.kv_dim(), config.mlp_dim);
        let mut params = IndexMap::new();
        let mut put = |name: String, t: ParamType, layer: Option<usize>, tensor: Tensor| {
            params.insert(
                name,
                Param {
                    param_type: t,
                    layer,
                    tensor,
                },
            );
        };
        let embed_rows = config.vocab_size + config.max_seq_len;
        put(
            EMBED.into(),
            ParamType::Embedding,
            None,
            Tensor::randn(&[embed_rows, d], 1.0, &mut rng),
        );
        let proj = |out: usize, inp: usize, rng: &mut ChaCha8Rng| {
            Tensor::randn(&[out, inp], 1.0 / (inp as f64).sqrt(), rng)
        };
        for l in 0..config.num_layers {
            let lay = Some(l);
            put(layer_name(l, "attn_norm"), ParamType::Norm, lay, Tensor::full(&[d], 1.0));
            put(layer_name(l, "wq"), ParamType::Wq, lay, proj(d, d, &mut rng));
            put(layer_name(l, "wk"), ParamType::Wk, lay, proj(kv, d, &mut rng));
            put(layer_name(l, "wv"), ParamType::Wv, lay, proj(kv, d, &mut rng));
            put(layer_name(l, "wo"), ParamType::Wo, lay, proj(d, d, &mut rng));
            put(layer_name(l, "mlp_norm"), ParamType::Norm, lay, Tensor::full(&[d], 1.0));
            put(layer_name(l, "mlp_gate"), ParamType::MlpGate, lay, proj(f, d, &mut rng));
            put(layer_name(l, "mlp_up"), ParamType::MlpUp, lay, proj(f, d, &mut rng));
            put(layer_name(l, "mlp_down"), ParamType::MlpDown, lay, proj(d, f, &mut rng));
        }
        put(FINAL_NORM.into(), ParamType::Norm, None, Tensor::full(&[d], 1.0));
        put(
            HEAD.into(),
            ParamType::Head,
            None,
            proj(config.vocab_size, d, &mut rng),
        );
        Self::from_parts(config, params)
    }

    fn check_layout(&self) -> Result<()> {
        let count = |t: ParamType| self.params.values().filter(|p| p.param_type == t).count();
        if count(ParamType::Embedding) != 1 || count(ParamType::Head) != 1 {
            return Err(Error::Consistency(
                "a parameter store needs exactly one Embedding and one Head entry".into(),
            ));
        }
        let c = &self.config;
        let (d, kv, f) = (c.hidden_dim, c.kv_dim(), c.mlp_dim);
        let mut expect: Vec<(String, Vec<usize>)> = vec![
            (EMBED.into(), vec![c.vocab_size + c.max_seq_len, d]),
            (FINAL_NORM.into(), vec![d]),
            (HEAD.into(), vec![c.num_classes, d]),
        ];
        for l in 0..c.num_layers {
            expect.extend([
                (layer_name(l, "attn_norm"), vec![d]),
                (layer_name(l, "wq"), vec![d, d]),
                (layer_name(l, "wk"), vec![kv, d]),
                (layer_name(l, "wv"), vec![kv, d]),
                (layer_name(l, "wo"), vec![d, d]),
                (layer_name(l, "mlp_norm"), vec![d]),
                (layer_name(l, "mlp_gate"), vec![f, d]),
                (layer_name(l, "mlp_up"), vec![f, d]),
                (layer_name(l, "mlp_down"), vec![d, f]),
            ]);
        }
        for (name, shape) in expect {
            let p = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Consistency(format!("missing tensor '{name}'")))?;
            if p.tensor.shape() != shape.as_slice() {
                return Err(Error::Consistency(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    p.tensor.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Consistency(format!("no tensor named '{name}'")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Consistency(format!("no tensor named '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count `n`.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Mutable data of the named tensors, in the order of `names`. Unknown
    /// names are skipped.
    pub fn tensors_mut(&mut self, names: &[&str]) -> Vec<&mut [f32]> {
        let mut slots: Vec<Option<&mut [f32]>> = (0..names.len()).map(|_| None).collect();
        for (k, p) in self.params.iter_mut() {
            if let Some(i) = names.iter().position(|n| n == k) {
                slots[i] = Some(p.tensor.data_mut());
            }
        }
        slots.into_iter().flatten().collect()
    }

    /// Scalars whose type is in `filter`.
    pub fn count_params(&self, filter: &TargetSet) -> usize {
        self.params
            .values()
            .filter(|p| filter.contains(p.param_type))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Names of the tensors whose type is in `filter`, in store order.
    pub fn names_of(&self, filter: &TargetSet) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| filter.contains(p.param_type))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Replaces the head with a `[classes × d]` classification head.
    ///
    /// The new head is a fresh tensor and never shares storage with the
    /// embedding table.
    pub fn swap_head(&self, classes: usize, init: &HeadInit) -> Result<Self> {
        if classes == 0 {
            return Err(Error::config("class count must be positive"));
        }
        let d = self.config.hidden_dim;
        let new_head = match init {
            HeadInit::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Tensor::randn(&[classes, d], HEAD_INIT_STD, &mut rng)
            }
            HeadInit::FromVocabRows(ids) => {
                if ids.len() != classes {
                    return Err(Error::config(format!(
                        "{} class token ids for {classes} classes",
                        ids.len()
                    )));
                }
                let unique: BTreeSet<_> = ids.iter().collect();
                if unique.len() != ids.len() {
                    return Err(Error::config("duplicate class token ids"));
                }
                let old = self.tensor(HEAD)?;
                let mut data = Vec::with_capacity(classes * d);
                for &id in ids {
                    if id >= old.rows() {
                        return Err(Error::Vocabulary {
                            id,
                            vocab_size: old.rows(),
                        });
                    }
                    data.extend_from_slice(old.row(id));
                }
                Tensor::new(vec![classes, d], data)?
            }
        };
        let mut out = self.clone();
        out.config.num_classes = classes;
        out.params.get_mut(HEAD).expect("head present").tensor = new_head;
        out.check_layout()?;
        Ok(out)
    }

    /// SHA-256 over names, types, shapes and values, as lowercase hex.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            h.update(p.param_type.as_str().as_bytes());
            for &s in p.tensor.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HeadInit {
    Random { seed: u64 },
    FromVocabRows(Vec<usize>),
}

/// Token sequences right-padded with [`PAD_ID`] to a common length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    lengths: Vec<usize>,
    seq_len: usize,
}

impl TokenBatch {
    pub fn new(seqs: &[Vec<usize>], config: &ModelConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.iter().any(Vec::is_empty) {
            return Err(Error::Input("empty token sequence".into()));
        }
        if seq_len > config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence of {seq_len} tokens exceeds max_seq_len {}",
                config.max_seq_len
            )));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            if let Some(&id) = s.iter().find(|&&id| id >= config.vocab_size) {
                return Err(Error::Vocabulary {
                    id,
                    vocab_size: config.vocab_size,
                });
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(PAD_ID).take(seq_len - s.len()));
        }
        Ok(Self {
            ids,
            lengths: seqs.iter().map(Vec::len).collect(),
            seq_len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
}

/// Tape vars standing in for each named tensor during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("tensor '{name}' is not bound")))
    }
}

/// Puts every tensor of `store` on the tape as a leaf; `trainable` decides
/// which leaves require grad.
pub fn bind_store<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParameterStore,
    trainable: impl Fn(&str, &Param) -> bool,
) -> Bindings {
    let mut b = Bindings::default();
    for (name, p) in store.iter() {
        let v = tape.leaf(p.tensor.cast::<T>(), trainable(name, p));
        b.insert(name, v);
    }
    b
}

/// Dropout configuration for a training-mode forward pass.
pub struct DropoutCtx {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

fn maybe_dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    dropout: &mut Option<&mut DropoutCtx>,
) -> Result<Var> {
    match dropout {
        Some(ctx) if ctx.rate > 0.0 => tape.dropout(x, ctx.rate, &mut ctx.rng),
        _ => Ok(x),
    }
}

/// Runs the decoder stack and returns the final normalized hidden states,
/// `[batch·seq_len × d]`, row `b·seq_len + t` for token `t` of sequence `b`.
pub fn forward_hidden<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    w: &Bindings,
    batch: &TokenBatch,
    mut dropout: Option<&mut DropoutCtx>,
) -> Result<Var> {
    let (bsz, tlen) = (batch.batch_size(), batch.seq_len());
    let (hd, nh) = (config.head_dim, config.num_heads);
    let group = nh / config.num_kv_heads;
    let embed = w.get(EMBED)?;
    let tok = tape.embedding_lookup(embed, batch.ids())?;
    let pos_ids: Vec<usize> = (0..bsz)
        .flat_map(|_| (0..tlen).map(|t| config.vocab_size + t))
        .collect();
    let pos = tape.embedding_lookup(embed, &pos_ids)?;
    let mut h = tape.add(tok, pos)?;
    let inv_sqrt = T::from_f64_lossy(1.0 / (hd as f64).sqrt());

    for l in 0..config.num_layers {
        let a = tape.rmsnorm(h, w.get(&layer_name(l, "attn_norm"))?)?;
        let q = project(tape, a, w.get(&layer_name(l, "wq"))?)?;
        let k = project(tape, a, w.get(&layer_name(l, "wk"))?)?;
        let v = project(tape, a, w.get(&layer_name(l, "wv"))?)?;
        let mut seqs = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let (r0, r1) = (b * tlen, (b + 1) * tlen);
            let qb = tape.slice_rows(q, r0, r1)?;
            let kb = tape.slice_rows(k, r0, r1)?;
            let vb = tape.slice_rows(v, r0, r1)?;
            let mut heads = Vec::with_capacity(nh);
            for head in 0..nh {
                let kvh = head / group;
                let qh = tape.slice_cols(qb, head * hd, (head + 1) * hd)?;
                let kh = tape.slice_cols(kb, kvh * hd, (kvh + 1) * hd)?;
                let vh = tape.slice_cols(vb, kvh * hd, (kvh + 1) * hd)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, inv_sqrt)?;
                let probs = tape.causal_softmax(scores)?;
                let probs = maybe_dropout(tape, probs, &mut dropout)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            seqs.push(tape.concat_cols(&heads)?);
        }
        let attn = tape.concat_rows(&seqs)?;
        let attn = project(tape, attn, w.get(&layer_name(l, "wo"))?)?;
        h = tape.add(h, attn)?;

        let m = tape.rmsnorm(h, w.get(&layer_name(l, "mlp_norm"))?)?;
        let gate = project(tape, m, w.get(&layer_name(l, "mlp_gate"))?)?;
        let up = project(tape, m, w.get(&layer_name(l, "mlp_up"))?)?;
        let gate = tape.silu(gate)?;
        let act = tape.mul(gate, up)?;
        let act = maybe_dropout(tape, act, &mut dropout)?;
        let down = project(tape, act, w.get(&layer_name(l, "mlp_down"))?)?;
        h = tape.add(h, down)?;
    }
    tape.rmsnorm(h, w.get(FINAL_NORM)?)
}

/// `x · Wᵀ` for a weight stored `[out × in]`.
fn project<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var) -> Result<Var> {
    let wt = tape.transpose(weight)?;
    tape.matmul(x, wt)
}

/// Classification logits `[batch × c]` from the hidden state at each
/// sequence's last non-pad position.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    w: &Bindings,
    batch: &TokenBatch,
    dropout: Option<&mut DropoutCtx>,
) -> Result<Var> {
    let hidden = forward_hidden(tape, config, w, batch, dropout)?;
    let last: Vec<usize> = batch
        .lengths()
        .iter()
        .enumerate()
        .map(|(b, &len)| b * batch.seq_len() + len - 1)
        .collect();
    let h_last = tape.embedding_lookup(hidden, &last)?;
    project(tape, h_last, w.get(HEAD)?)
}

/// Frozen forward pass over a store, returning `[batch × c]` logits.
pub fn predict_logits(store: &ParameterStore, batch: &TokenBatch) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let w = bind_store(&mut tape, store, |_, _| false);
    let out = forward(&mut tape, store.config(), &w, batch, None)?;
    Ok(tape.value(out).clone())
}

/// Row-wise softmax of a `[batch × c]` logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|i| {
            let row: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            row.iter().map(|v| (v - mx).exp() / z).collect()
        })
        .collect()
}
