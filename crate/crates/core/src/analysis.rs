//! Rank analysis of fine-tuning deltas and random dropping of dense deltas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamType, ParameterStore, TargetSet};
use crate::sparta::{bernoulli_entry_keyed, IndexEntry, IndexSet, SparseDelta};
use crate::tensor::Tensor;

pub const DEFAULT_RANK_TOL: f64 = 1e-5;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Singular values of a row-major `rows × cols` matrix, descending, by
/// one-sided Jacobi rotations in `f64`.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(data.len(), rows * cols);
    // Orthogonalize the columns of the taller orientation.
    let (m, n, cols_major): (usize, usize, Vec<Vec<f64>>) = if rows >= cols {
        (
            rows,
            cols,
            (0..cols)
                .map(|j| (0..rows).map(|i| data[i * cols + j]).collect())
                .collect(),
        )
    } else {
        (cols, rows, data.chunks(cols).map(<[f64]>::to_vec).collect())
    };
    let mut u = cols_major;
    debug_assert!(u.iter().all(|c| c.len() == m));
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let (alpha, beta, gamma) = {
                    let (ui, uj) = (&u[i], &u[j]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for k in 0..m {
                        a += ui[k] * ui[k];
                        b += uj[k] * uj[k];
                        g += ui[k] * uj[k];
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = u.split_at_mut(j);
                let (ui, uj) = (&mut lo[i], &mut hi[0]);
                for k in 0..m {
                    let (x, y) = (ui[k], uj[k]);
                    ui[k] = c * x - s * y;
                    uj[k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = u
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of singular values above `tol · σ_max`.
pub fn rank_of(sv: &[f64], tol: f64) -> usize {
    let max = sv.first().copied().unwrap_or(0.0);
    sv.iter().filter(|&&s| s > tol * max).count()
}

/// Rank of `W_FT − W_PT` at relative tolerance `tol`.
pub fn delta_rank(w_pt: &Tensor, w_ft: &Tensor, tol: f64) -> Result<usize> {
    Ok(rank_of(&delta_singular_values(w_pt, w_ft)?, tol))
}

fn delta_singular_values(w_pt: &Tensor, w_ft: &Tensor) -> Result<Vec<f64>> {
    if w_pt.shape() != w_ft.shape() {
        return Err(Error::shape(format!(
            "delta of {:?} and {:?}",
            w_pt.shape(),
            w_ft.shape()
        )));
    }
    if w_pt.ndim() != 2 {
        return Err(Error::shape(format!(
            "rank needs a 2-D tensor, got {:?}",
            w_pt.shape()
        )));
    }
    let d: Vec<f64> = w_ft
        .data()
        .iter()
        .zip(w_pt.data())
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    Ok(singular_values(&d, w_pt.rows(), w_pt.cols()))
}

/// Pre-trained and fine-tuned weights with identical manifests.
#[derive(Clone, Debug)]
pub struct CheckpointPair {
    pub pt: ParameterStore,
    pub ft: ParameterStore,
}

impl CheckpointPair {
    pub fn new(pt: ParameterStore, ft: ParameterStore) -> Result<Self> {
        if pt.len() != ft.len() {
            return Err(Error::Pairing(format!(
                "checkpoints hold {} and {} tensors",
                pt.len(),
                ft.len()
            )));
        }
        for ((na, a), (nb, b)) in pt.iter().zip(ft.iter()) {
            if na != nb
                || a.param_type != b.param_type
                || a.layer != b.layer
                || a.tensor.shape() != b.tensor.shape()
            {
                return Err(Error::Pairing(format!(
                    "manifest mismatch: '{na}' {:?} vs '{nb}' {:?}",
                    a.tensor.shape(),
                    b.tensor.shape()
                )));
            }
        }
        Ok(Self { pt, ft })
    }

    /// `θ_FT − θ_PT` per tensor, in manifest order.
    pub fn dense_delta(&self) -> Vec<(String, ParamType, Tensor)> {
        self.pt
            .iter()
            .zip(self.ft.iter())
            .map(|((name, a), (_, b))| {
                let d = b.tensor.sub(&a.tensor).expect("shapes checked");
                (name.to_string(), a.param_type, d)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub name: String,
    pub param_type: ParamType,
    pub dims: [usize; 2],
    pub rank: usize,
    pub deficiency: usize,
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub entries: Vec<RankEntry>,
    /// Tensors that are not 2-D.
    pub skipped: Vec<String>,
}

pub fn rank_report(pair: &CheckpointPair, tol: f64) -> Result<RankReport> {
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for ((name, a), (_, b)) in pair.pt.iter().zip(pair.ft.iter()) {
        if a.tensor.ndim() != 2 {
            skipped.push(name.to_string());
            continue;
        }
        let rank = delta_rank(&a.tensor, &b.tensor, tol)?;
        let dims = [a.tensor.rows(), a.tensor.cols()];
        entries.push(RankEntry {
            name: name.to_string(),
            param_type: a.param_type,
            dims,
            rank,
            deficiency: dims[0].min(dims[1]) - rank,
            tol,
        });
    }
    Ok(RankReport { entries, skipped })
}

impl RankReport {
    /// Table with one row per 2-D tensor: name, dims, rank, deficiency.
    pub fn render(&self) -> String {
        let w = self
            .entries
            .iter()
            .map(|e| e.name.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut out = format!(
            "{:<w$}  {:>11}  {:>6}  {:>10}\n",
            "name", "dims", "rank", "deficiency"
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{:<w$}  {:>11}  {:>6}  {:>10}\n",
                e.name,
                format!("{}x{}", e.dims[0], e.dims[1]),
                e.rank,
                e.deficiency
            ));
        }
        for s in &self.skipped {
            out.push_str(&format!("skipped {s}: not a matrix\n"));
        }
        out
    }
}

/// Output of [`random_drop`].
#[derive(Clone, Debug, PartialEq)]
pub struct DroppedDelta {
    pub index: IndexSet,
    pub delta: SparseDelta,
    pub targets: TargetSet,
}

/// Keeps each nonzero scalar of the dense deltas independently with
/// probability `1 − p`; kept values are scaled by `1 / (1 − p)` when
/// `rescale` is set.
pub fn random_drop(
    dense: &[(String, ParamType, Tensor)],
    p: f64,
    rescale: bool,
    seed: u64,
) -> Result<DroppedDelta> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("drop probability {p} is not in [0, 1)")));
    }
    let keep = 1.0 - p;
    let scale = if rescale { (1.0 / keep) as f32 } else { 1.0 };
    let mut entries = Vec::new();
    let mut values = Vec::new();
    let mut types = Vec::new();
    for (name, ty, t) in dense {
        // Separate stream so a drop mask is independent of a sampler mask with the same seed.
        let sampled = bernoulli_entry_keyed(name, &format!("drop:{name}"), t.shape(), keep, seed)?;
        let data = t.data();
        let mut e = IndexEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            rows: Vec::new(),
            cols: Vec::new(),
        };
        let mut v = Vec::new();
        for i in 0..sampled.len() {
            let f = sampled.flat(i);
            if data[f] != 0.0 {
                e.rows.push(sampled.rows[i]);
                if sampled.is_matrix() {
                    e.cols.push(sampled.cols[i]);
                }
                v.push(data[f] * scale);
            }
        }
        if !e.is_empty() {
            types.push(*ty);
            entries.push(e);
            values.push(v);
        }
    }
    Ok(DroppedDelta {
        index: IndexSet { entries },
        delta: SparseDelta { values },
        targets: TargetSet::new(types),
    })
}

/// Scatters a sparse delta back into dense per-tensor form.
pub fn densify(index: &IndexSet, delta: &SparseDelta) -> Result<Vec<Tensor>> {
    delta.check_aligned(index)?;
    Ok(index
        .entries
        .iter()
        .zip(&delta.values)
        .map(|(e, v)| {
            let mut t = Tensor::zeros(&e.shape);
            let d = t.data_mut();
            for (i, &x) in v.iter().enumerate() {
                d[e.flat(i)] = x;
            }
            t
        })
        .collect())
}
