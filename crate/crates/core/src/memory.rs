//! Training-memory accounting for full fine-tuning vs sparse adaptation.
//!
//! With `w` bytes per parameter value and 2-byte indices:
//!
//! - full FT holds parameters, gradients and two Adam moments: `4·n·w`;
//! - sparse adaptation holds the frozen model (`n·w`) plus, per trainable
//!   scalar, the delta, its gradient and two moments (`4·w`) and two indices
//!   (`2·2`);
//! - the adapter itself (delta values + indices) costs `m·(w + 4)`.
//!
//! At `w = 2` these are `8n`, `2n(1 + 6k)` and `6m` bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparta::{check_density, IndexSet};

/// Bytes per stored index.
pub const INDEX_BYTES: u64 = 2;
/// Indices per trainable scalar in a 2-D tensor.
pub const INDICES_PER_VALUE: u64 = 2;

/// Byte counts at one value width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthAccounting {
    pub bits_per_value: u32,
    pub storage_bytes: u64,
    pub fullft_train_bytes: u64,
    pub sparta_train_bytes: u64,
    pub extra_adapter_bytes: u64,
}

impl WidthAccounting {
    pub fn new(n: u64, m: u64, bits_per_value: u32) -> Self {
        let w = bits_per_value as u64 / 8;
        let idx = INDICES_PER_VALUE * INDEX_BYTES;
        Self {
            bits_per_value,
            storage_bytes: n * w,
            fullft_train_bytes: 4 * n * w,
            sparta_train_bytes: m * (4 * w + idx) + n * w,
            extra_adapter_bytes: m * (w + idx),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub n: u64,
    pub m: u64,
    pub density: f64,
    pub sparsity: f64,
    /// 16-bit (bfloat16) accounting.
    pub bits_per_value: u32,
    pub storage_bytes: u64,
    pub fullft_train_bytes: u64,
    pub sparta_train_bytes: u64,
    pub extra_adapter_bytes: u64,
    /// `None` when `k ≥ 0.5`.
    pub savings_fraction: Option<f64>,
    pub breakeven: bool,
    /// Same quantities at the 32-bit compute width.
    pub f32: WidthAccounting,
    /// Index bytes of a concrete index set. Differs from `4·m` when 1-D
    /// tensors are targeted, since those store a single index per value.
    pub measured_index_bytes: Option<u64>,
}

/// Memory report for `n` scalars at density `k`; `m = round(k·n)`.
pub fn memory_report(n: u64, k: f64) -> Result<MemoryReport> {
    check_density(k)?;
    if n == 0 {
        return Err(Error::config("n must be positive"));
    }
    let m = (k * n as f64).round() as u64;
    Ok(build(n, m, k, None))
}

/// Memory report for a sampled index set over a model of `n` scalars.
pub fn memory_report_for_index(n: u64, index: &IndexSet) -> Result<MemoryReport> {
    if n == 0 {
        return Err(Error::config("n must be positive"));
    }
    let m = index.count() as u64;
    let k = m as f64 / n as f64;
    Ok(build(n, m, k, Some(index.index_bytes() as u64)))
}

fn build(n: u64, m: u64, k: f64, measured_index_bytes: Option<u64>) -> MemoryReport {
    let bf16 = WidthAccounting::new(n, m, 16);
    MemoryReport {
        n,
        m,
        density: k,
        sparsity: 1.0 - k,
        bits_per_value: 16,
        storage_bytes: bf16.storage_bytes,
        fullft_train_bytes: bf16.fullft_train_bytes,
        sparta_train_bytes: bf16.sparta_train_bytes,
        extra_adapter_bytes: bf16.extra_adapter_bytes,
        savings_fraction: savings_fraction(k).ok(),
        breakeven: k < 0.5,
        f32: WidthAccounting::new(n, m, 32),
        measured_index_bytes,
    }
}

/// Fraction of full-FT training memory saved: `(3 − 6k) / 4`.
pub fn savings_fraction(k: f64) -> Result<f64> {
    check_density(k)?;
    if k >= 0.5 {
        return Err(Error::NoSavings { density: k });
    }
    Ok((3.0 - 6.0 * k) / 4.0)
}

/// Bytes to GB (1e9) rounded to one decimal.
pub fn gb(bytes: u64) -> f64 {
    (bytes as f64 / 1e8).round() / 10.0
}

/// Sparsity levels of the comparison table.
pub const TABLE_SPARSITIES: [f64; 5] = [0.5, 0.8, 0.9, 0.95, 0.99];

/// One row of the comparison table: full FT, then each sparsity level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub n: u64,
    pub fullft_gb: f64,
    pub sparta_gb: Vec<(f64, f64)>,
}

pub fn table_row(n: u64, sparsities: &[f64]) -> Result<TableRow> {
    let fullft_gb = gb(memory_report(n, 1.0)?.fullft_train_bytes);
    let sparta_gb = sparsities
        .iter()
        .map(|&s| {
            let k = round_density(1.0 - s);
            Ok((s, gb(memory_report(n, k)?.sparta_train_bytes)))
        })
        .collect::<Result<_>>()?;
    Ok(TableRow {
        n,
        fullft_gb,
        sparta_gb,
    })
}

/// `1 − s` leaves representation noise (`1 − 0.9 = 0.09999…`); snap to the
/// nearest 1e-12.
pub fn round_density(k: f64) -> f64 {
    (k * 1e12).round() / 1e12
}

/// Plain-text table, one row per model size.
pub fn render_table(rows: &[TableRow]) -> String {
    let mut out = String::new();
    let Some(first) = rows.first() else {
        return out;
    };
    out.push_str(&format!("{:>8} {:>8}", "n", "full-ft"));
    for (s, _) in &first.sparta_gb {
        out.push_str(&format!(" {:>7}", format!("s={}%", trim(s * 100.0))));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:>8} {:>8.1}", human(r.n), r.fullft_gb));
        for (_, v) in &r.sparta_gb {
            out.push_str(&format!(" {:>7.1}", v));
        }
        out.push('\n');
    }
    out
}

fn trim(v: f64) -> String {
    let s = format!("{:.2}", v);
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn human(n: u64) -> String {
    if n >= 1_000_000_000 && n % 100_000_000 == 0 {
        format!("{}B", trim(n as f64 / 1e9))
    } else if n >= 1_000_000 && n % 100_000 == 0 {
        format!("{}M", trim(n as f64 / 1e6))
    } else {
        n.to_string()
    }
}
