//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order. Because an
//! operation can only consume vars that already exist, node index order is a
//! topological order, and [`Tape::backward`] simply walks it in reverse.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{dims2, kernels, same_shape, Scalar, Tensor};

/// RMS normalization epsilon.
pub const RMSNORM_EPS: f64 = 1e-6;

/// Floor below which a column norm is treated as zero.
pub const COLUMN_NORM_FLOOR: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale,
    Silu,
    RmsNorm,
    EmbeddingLookup,
    Transpose,
    SliceRows,
    SliceCols,
    ConcatRows,
    ConcatCols,
    CausalSoftmax,
    Dropout,
    ColumnNormalize,
    ScaleCols,
    SoftmaxCrossEntropy,
    WeightedSum,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    EmbeddingLookup { table: Var, ids: Vec<usize> },
    Transpose(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    CausalSoftmax(Var),
    Dropout { x: Var, mask: Vec<T> },
    ColumnNormalize { x: Var, norms: Vec<T> },
    ScaleCols { x: Var, s: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    WeightedSum { x: Var, weights: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Silu(..) => OpKind::Silu,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::EmbeddingLookup { .. } => OpKind::EmbeddingLookup,
            Op::Transpose(..) => OpKind::Transpose,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::CausalSoftmax(..) => OpKind::CausalSoftmax,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::ColumnNormalize { .. } => OpKind::ColumnNormalize,
            Op::ScaleCols { .. } => OpKind::ScaleCols,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Returns `None` for vars that do not require grad or were not reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// The executed operation sequence, leaves excluded.
    pub fn op_trace(&self) -> Vec<OpKind> {
        self.nodes
            .iter()
            .map(|n| n.op.kind())
            .filter(|k| *k != OpKind::Leaf)
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(!self.backward_done, "tape already consumed by backward");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_open(&self) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "tape was consumed by backward; record a new tape".into(),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * sigmoid(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Silu(a), rg))
    }

    /// Row-wise RMS normalization of `x[r×d]` scaled by `gain[d]`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.check_open()?;
        let (tx, tg) = (self.value(x), self.value(gain));
        let (r, d) = dims2(tx, "rmsnorm input")?;
        if tg.numel() != d {
            return Err(Error::shape(format!(
                "rmsnorm gain {:?} does not match input {:?}",
                tg.shape(),
                tx.shape()
            )));
        }
        let eps = T::from_f64_lossy(RMSNORM_EPS);
        let dn = T::from_usize(d).unwrap();
        let mut out = Vec::with_capacity(r * d);
        let mut inv_rms = Vec::with_capacity(r);
        for i in 0..r {
            let row = tx.row(i);
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(tg.data()).map(|(&v, &g)| v * inv * g));
        }
        let out = Tensor::new(vec![r, d], out)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Gathers rows of `table` by id, producing `[ids.len() × cols]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check_open()?;
        let tt = self.value(table);
        let (rows, cols) = dims2(tt, "embedding table")?;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index(format!(
                    "row {id} is outside a table with {rows} rows"
                )));
            }
            out.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.check_open()?;
        let tx = self.value(x);
        let (r, c) = dims2(tx, "slice_rows input")?;
        if start > end || end > r {
            return Err(Error::shape(format!(
                "row slice {start}..{end} out of bounds for {:?}",
                tx.shape()
            )));
        }
        let out = Tensor::new(vec![end - start, c], tx.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.check_open()?;
        let tx = self.value(x);
        let (r, c) = dims2(tx, "slice_cols input")?;
        if start > end || end > c {
            return Err(Error::shape(format!(
                "column slice {start}..{end} out of bounds for {:?}",
                tx.shape()
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&tx.row(i)[start..end]);
        }
        let out = Tensor::new(vec![r, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_open()?;
        let c = self.concat_width(parts, true)?;
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            let t = self.value(p);
            r += t.rows();
            out.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_open()?;
        let r = self.concat_width(parts, false)?;
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Shared extent of the parts: column count for row concat, row count
    /// for column concat.
    fn concat_width(&self, parts: &[Var], rows: bool) -> Result<usize> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let (r0, c0) = dims2(self.value(*first), "concat part")?;
        let want = if rows { c0 } else { r0 };
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat part")?;
            let got = if rows { c } else { r };
            if got != want {
                return Err(Error::shape(format!(
                    "concat parts disagree: {:?} vs {:?}",
                    self.value(*first).shape(),
                    self.value(p).shape()
                )));
            }
        }
        Ok(want)
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let tx = self.value(x);
        let (r, c) = dims2(tx, "causal_softmax input")?;
        if r != c {
            return Err(Error::shape(format!(
                "causal_softmax needs a square matrix, got {:?}",
                tx.shape()
            )));
        }
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &tx.row(i)[..=i];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[i * c + j] = e;
                z = z + e;
            }
            for v in &mut out[i * c..=i * c + i] {
                *v = *v / z;
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::CausalSoftmax(x), rg))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        self.check_open()?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} not in [0, 1)")));
        }
        let tx = self.value(x);
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..tx.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Divides each column of `x` by its Euclidean norm.
    pub fn column_normalize(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let tx = self.value(x);
        let (r, c) = dims2(tx, "column_normalize input")?;
        let mut norms = vec![T::zero(); c];
        for i in 0..r {
            for (n, &v) in norms.iter_mut().zip(tx.row(i)) {
                *n = *n + v * v;
            }
        }
        for (j, n) in norms.iter_mut().enumerate() {
            *n = n.sqrt();
            if n.to_f64_lossy() < COLUMN_NORM_FLOOR {
                return Err(Error::Numeric(format!(
                    "column {j} has norm below {COLUMN_NORM_FLOOR:e}"
                )));
            }
        }
        let mut out = tx.data().to_vec();
        for i in 0..r {
            for (v, &n) in out[i * c..(i + 1) * c].iter_mut().zip(&norms) {
                *v = *v / n;
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ColumnNormalize { x, norms }, rg))
    }

    /// `y[i, j] = x[i, j] * s[j]`.
    pub fn scale_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_open()?;
        let (tx, ts) = (self.value(x), self.value(s));
        let (r, c) = dims2(tx, "scale_cols input")?;
        if ts.numel() != c {
            return Err(Error::shape(format!(
                "scale_cols factors {:?} do not match {:?}",
                ts.shape(),
                tx.shape()
            )));
        }
        let mut out = tx.data().to_vec();
        for i in 0..r {
            for (v, &f) in out[i * c..(i + 1) * c].iter_mut().zip(ts.data()) {
                *v = *v * f;
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleCols { x, s }, rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_open()?;
        let tl = self.value(logits);
        let (b, c) = dims2(tl, "logits")?;
        if labels.len() != b {
            return Err(Error::shape(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        if b == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut total = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Index(format!("label {y} outside {c} classes")));
            }
            let row: Vec<f64> = tl.row(i).iter().map(|v| v.to_f64_lossy()).collect();
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[y];
            probs.extend(row.iter().map(|v| T::from_f64_lossy((v - lse).exp())));
        }
        let loss = T::from_f64_lossy(total / b as f64);
        let out = Tensor::new(vec![1], vec![loss])?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Scalar `Σ x ⊙ weights` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        self.check_open()?;
        let tx = self.value(x);
        if tx.numel() != weights.len() {
            return Err(Error::shape(format!(
                "{} weights for a tensor of shape {:?}",
                weights.len(),
                tx.shape()
            )));
        }
        let s = tx.data().iter().zip(weights).map(|(&a, &w)| a * w).sum();
        let out = Tensor::new(vec![1], vec![s])?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Back-propagates from the scalar `loss`. A tape supports exactly one
    /// backward pass; a second call is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, grads, node, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Accumulates `f`'s contribution into the gradient buffer of `v`, if `v`
/// takes part in differentiation.
fn acc<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
    f(buf);
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    node: &Node<T>,
    g: &[T],
) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let p = tb.shape()[1];
            acc(nodes, grads, *a, |ga| kernels::mm_bt_acc(ga, g, tb.data(), m, k, p));
            acc(nodes, grads, *b, |gb| kernels::mm_at_acc(gb, ta.data(), g, m, k, p));
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                acc(nodes, grads, v, |gv| {
                    for (o, &x) in gv.iter_mut().zip(g) {
                        *o = *o + x;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            acc(nodes, grads, *a, |ga| {
                for ((o, &x), &y) in ga.iter_mut().zip(g).zip(tb.data()) {
                    *o = *o + x * y;
                }
            });
            acc(nodes, grads, *b, |gb| {
                for ((o, &x), &y) in gb.iter_mut().zip(g).zip(ta.data()) {
                    *o = *o + x * y;
                }
            });
        }
        Op::Scale(a, s) => acc(nodes, grads, *a, |ga| {
            for (o, &x) in ga.iter_mut().zip(g) {
                *o = *o + x * *s;
            }
        }),
        Op::Silu(a) => {
            let ta = val(*a);
            acc(nodes, grads, *a, |ga| {
                for ((o, &x), &gv) in ga.iter_mut().zip(ta.data()).zip(g) {
                    let s = sigmoid(x);
                    *o = *o + gv * s * (T::one() + x * (T::one() - s));
                }
            });
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (tx, tg) = (val(*x), val(*gain));
            let d = tx.shape()[1];
            let dn = T::from_usize(d).unwrap();
            acc(nodes, grads, *x, |gx| {
                for (i, &inv) in inv_rms.iter().enumerate() {
                    let row = tx.row(i);
                    let grow = &g[i * d..(i + 1) * d];
                    // ghat = g * gain; dx = inv * (ghat - xhat * mean(ghat * xhat))
                    let dot: T = (0..d)
                        .map(|j| grow[j] * tg.data()[j] * row[j] * inv)
                        .sum::<T>()
                        / dn;
                    for j in 0..d {
                        let xhat = row[j] * inv;
                        let ghat = grow[j] * tg.data()[j];
                        gx[i * d + j] = gx[i * d + j] + inv * (ghat - xhat * dot);
                    }
                }
            });
            acc(nodes, grads, *gain, |gg| {
                for (i, &inv) in inv_rms.iter().enumerate() {
                    let row = tx.row(i);
                    for j in 0..d {
                        gg[j] = gg[j] + g[i * d + j] * row[j] * inv;
                    }
                }
            });
        }
        Op::EmbeddingLookup { table, ids } => {
            let c = val(*table).shape()[1];
            acc(nodes, grads, *table, |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt[id * c + j] = gt[id * c + j] + g[r * c + j];
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
            acc(nodes, grads, *a, |ga| {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                    }
                }
            });
        }
        Op::SliceRows { x, start } => {
            let c = val(*x).shape()[1];
            acc(nodes, grads, *x, |gx| {
                for (o, &v) in gx[start * c..start * c + g.len()].iter_mut().zip(g) {
                    *o = *o + v;
                }
            });
        }
        Op::SliceCols { x, start } => {
            let c = val(*x).shape()[1];
            let (r, w) = (node.value.shape()[0], node.value.shape()[1]);
            acc(nodes, grads, *x, |gx| {
                for i in 0..r {
                    for j in 0..w {
                        gx[i * c + start + j] = gx[i * c + start + j] + g[i * w + j];
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).numel();
                acc(nodes, grads, p, |gp| {
                    for (o, &v) in gp.iter_mut().zip(&g[off..off + n]) {
                        *o = *o + v;
                    }
                });
                off += n;
            }
        }
        Op::ConcatCols(parts) => {
            let (r, total) = (node.value.shape()[0], node.value.shape()[1]);
            let mut col = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                acc(nodes, grads, p, |gp| {
                    for i in 0..r {
                        for j in 0..w {
                            gp[i * w + j] = gp[i * w + j] + g[i * total + col + j];
                        }
                    }
                });
                col += w;
            }
        }
        Op::CausalSoftmax(x) => {
            let y = &node.value;
            let c = y.shape()[1];
            acc(nodes, grads, *x, |gx| {
                for i in 0..c {
                    let yr = &y.row(i)[..=i];
                    let gr = &g[i * c..=i * c + i];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..=i {
                        gx[i * c + j] = gx[i * c + j] + yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::Dropout { x, mask } => acc(nodes, grads, *x, |gx| {
            for ((o, &v), &m) in gx.iter_mut().zip(g).zip(mask) {
                *o = *o + v * m;
            }
        }),
        Op::ColumnNormalize { x, norms } => {
            let y = &node.value;
            let (r, c) = (y.shape()[0], y.shape()[1]);
            let mut dots = vec![T::zero(); c];
            for i in 0..r {
                for j in 0..c {
                    dots[j] = dots[j] + y.data()[i * c + j] * g[i * c + j];
                }
            }
            acc(nodes, grads, *x, |gx| {
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        gx[k] = gx[k] + (g[k] - y.data()[k] * dots[j]) / norms[j];
                    }
                }
            });
        }
        Op::ScaleCols { x, s } => {
            let (tx, ts) = (val(*x), val(*s));
            let c = tx.shape()[1];
            let r = tx.shape()[0];
            acc(nodes, grads, *x, |gx| {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + g[i * c + j] * ts.data()[j];
                    }
                }
            });
            acc(nodes, grads, *s, |gs| {
                for i in 0..r {
                    for j in 0..c {
                        gs[j] = gs[j] + g[i * c + j] * tx.data()[i * c + j];
                    }
                }
            });
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = val(*logits).shape()[1];
            let b = labels.len();
            let scale = g[0] / T::from_usize(b).unwrap();
            acc(nodes, grads, *logits, |gl| {
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { T::one() } else { T::zero() };
                        gl[i * c + j] = gl[i * c + j] + (probs[i * c + j] - onehot) * scale;
                    }
                }
            });
        }
        Op::WeightedSum { x, weights } => acc(nodes, grads, *x, |gx| {
            for (o, &w) in gx.iter_mut().zip(weights) {
                *o = *o + g[0] * w;
            }
        }),
    }
}
