//! Dense row-major tensors.
//!
//! Storage is generic over the float type so the same kernels can run in
//! `f32` for training and in `f64` for finite-difference gradient checks.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Sum + Default + Send + Sync + 'static
{
    fn from_f32(v: f32) -> Self;
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f32_lossy(self) -> f32;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Self {
            shape: vec![r, c],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Trailing dimension for 2-D tensors, 1 otherwise.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Explicit 2-D transpose (a copy, never a view).
    pub fn transpose(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::shape(format!(
                "transpose needs a 2-D tensor, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = dims2(self, "matmul lhs")?;
        let (k2, p) = dims2(other, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: vec![m, p],
            data: kernels::mm(&self.data, &other.data, m, k, p),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        same_shape(self, other, "add")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        same_shape(self, other, "sub")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }
}

pub(crate) fn dims2<T>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::shape(format!(
            "{what} must be 2-D, got shape {:?}",
            t.shape
        )));
    }
    Ok((t.shape[0], t.shape[1]))
}

pub(crate) fn same_shape<T>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "{what} needs equal shapes, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Plain row-major matrix kernels shared by the forward and backward passes.
pub(crate) mod kernels {
    use super::Scalar;

    /// `a[m×k] · b[k×p]`
    pub fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            let orow = &mut out[i * p..(i + 1) * p];
            for kk in 0..k {
                let av = a[i * k + kk];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[kk * p..(kk + 1) * p];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        out
    }

    /// `g[m×p] · b[k×p]ᵀ`, accumulated into `out[m×k]`.
    pub fn mm_bt_acc<T: Scalar>(out: &mut [T], g: &[T], b: &[T], m: usize, k: usize, p: usize) {
        for i in 0..m {
            let grow = &g[i * p..(i + 1) * p];
            for kk in 0..k {
                let brow = &b[kk * p..(kk + 1) * p];
                let mut acc = T::zero();
                for (&x, &y) in grow.iter().zip(brow) {
                    acc = acc + x * y;
                }
                out[i * k + kk] = out[i * k + kk] + acc;
            }
        }
    }

    /// `a[m×k]ᵀ · g[m×p]`, accumulated into `out[k×p]`.
    pub fn mm_at_acc<T: Scalar>(out: &mut [T], a: &[T], g: &[T], m: usize, k: usize, p: usize) {
        for i in 0..m {
            let grow = &g[i * p..(i + 1) * p];
            for kk in 0..k {
                let av = a[i * k + kk];
                if av == T::zero() {
                    continue;
                }
                let orow = &mut out[kk * p..(kk + 1) * p];
                for (o, &gv) in orow.iter_mut().zip(grow) {
                    *o = *o + av * gv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_len() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let tt = t.transpose().unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.data(), &[1., 4., 2., 5., 3., 6.]);
        assert_eq!(tt.transpose().unwrap(), t);
    }

    #[test]
    fn matmul_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }
}
