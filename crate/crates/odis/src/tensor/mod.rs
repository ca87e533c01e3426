//! Dense tensors and the reverse-mode tape.
//!
//! Training runs in `f32`; gradient checking runs the identical code in
//! `f64` (finite differences at h = 1e-3 are too noisy in single
//! precision). Everything downstream is generic over [`Scalar`] so both
//! precisions share one implementation.

pub mod gradcheck;
#[cfg(test)]
mod spec_tests;
pub mod tape;

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;

use crate::error::{OdisError, Result};

/// Element type for tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maxv(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn maxv(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(OdisError::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(OdisError::invalid(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::ZERO; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar payload of a one-element tensor.
    pub fn item(&self) -> E {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows of a matrix (a vector counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Columns of a matrix (a vector's length).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[E] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Convert element precision (used when loading f32 checkpoints into
    /// an f64 gradient-check run and when serializing).
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| F::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Gaussian init via Box-Muller so it is reproducible across platforms
/// (no dependency on distribution-crate internals).
pub fn randn<E: Scalar>(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor<E> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(E::from_f64(r * theta.cos() * std));
        if data.len() < numel {
            data.push(E::from_f64(r * theta.sin() * std));
        }
    }
    Tensor { shape, data }
}

// ---------------------------------------------------------------------------
// Matrix kernels. mm_nn is the hot path; transposed variants reuse it via an
// explicit transpose so every product accumulates in one fixed order.
// ---------------------------------------------------------------------------

/// out += a[m x k] * b[k x n]
pub(crate) fn mm_nn_acc<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c += ap * bv;
            }
        }
    }
}

pub(crate) fn transpose_buf<E: Scalar>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// a[m x k] * b[k x n]
pub(crate) fn mm_nn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; m * n];
    mm_nn_acc(a, b, m, k, n, &mut out);
    out
}

/// a[m x k] * b[n x k]^T
pub(crate) fn mm_nt<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let bt = transpose_buf(b, n, k);
    mm_nn(a, &bt, m, k, n)
}

/// a[k x m]^T * b[k x n]
pub(crate) fn mm_tn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let at = transpose_buf(a, k, m);
    mm_nn(&at, b, m, k, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn kernels_agree_on_small_case() {
        // [[1,2],[3,4]] * [[5],[6]] = [[17],[39]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0];
        assert_eq!(mm_nn(&a, &b, 2, 2, 1), vec![17.0, 39.0]);
        let bt = [5.0f64, 6.0]; // [1 x 2]
        assert_eq!(mm_nt(&a, &bt, 2, 2, 1), vec![17.0, 39.0]);
        let at = transpose_buf(&a, 2, 2);
        assert_eq!(mm_tn(&at, &b, 2, 2, 1), vec![17.0, 39.0]);
    }

    #[test]
    fn randn_is_seeded() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a: Tensor<f32> = randn(vec![3, 3], 0.02, &mut r1);
        let b: Tensor<f32> = randn(vec![3, 3], 0.02, &mut r2);
        assert_eq!(a, b);
    }
}
