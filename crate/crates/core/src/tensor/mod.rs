//! Dense row-major tensors and the raw matrix kernels shared by the
//! autodiff tape. The kernels run data-parallel with rayon when the
//! `parallel` feature is enabled and the problem is large enough; the
//! sequential fallback computes bit-identical results.

mod tape;

pub mod gradcheck;

pub use tape::{Gradients, Op, Tape, Var};

use crate::error::{Error, Result};
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Scalar element type for all math in the crate. `f32` is the training
/// default; `f64` backs the finite-difference gradient checks.
pub trait Real:
    Float
    + num_traits::NumAssign
    + std::iter::Sum
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
}

impl Real for f32 {
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> f64 {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense tensor with row-major storage. The shape/data length invariant is
/// established by the constructors and preserved by every tape operation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Standard-normal init. Samples are drawn in f64 so that f32 and f64
    /// tensors built from the same seed hold the same values.
    pub fn randn<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                F::from_f64(x)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// 2-D element access, debug/test convenience.
    pub fn at(&self, row: usize, col: usize) -> F {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

// ── Raw matrix kernels ─────────────────────────────────────────────────

/// Below this many multiply-adds the rayon dispatch overhead outweighs the
/// parallel win. Throughput parallelism lives at the batch/sample level,
/// so only genuinely large kernels split rows.
#[cfg(feature = "parallel")]
const PAR_MIN_MACS: usize = 1 << 23;

#[inline]
fn nn_row<F: Real>(a_row: &[F], b: &[F], out_row: &mut [F], k: usize, n: usize) {
    for (p, &av) in a_row.iter().enumerate().take(k) {
        let b_row = &b[p * n..p * n + n];
        for j in 0..n {
            out_row[j] += av * b_row[j];
        }
    }
}

/// C[m,n] = A[m,k] . B[k,n], sequential.
pub fn matmul_nn_seq<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        nn_row(&a[i * k..(i + 1) * k], b, &mut out[i * n..(i + 1) * n], k, n);
    }
}

/// C[m,n] = A[m,k] . B[k,n]; row-parallel when large enough. Each output
/// row is written by exactly one task in a fixed summation order, so the
/// result is bit-identical to the sequential kernel.
pub fn matmul_nn<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_MIN_MACS && m > 1 {
            out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
                nn_row(&a[i * k..(i + 1) * k], b, out_row, k, n);
            });
            return;
        }
    }
    matmul_nn_seq(a, b, out, m, k, n);
}

#[inline]
fn nt_row<F: Real>(a_row: &[F], b: &[F], out_row: &mut [F], k: usize, n: usize) {
    for (j, out_val) in out_row.iter_mut().enumerate().take(n) {
        let b_row = &b[j * k..j * k + k];
        let mut acc = F::zero();
        for p in 0..k {
            acc += a_row[p] * b_row[p];
        }
        *out_val += acc;
    }
}

/// C[m,n] = A[m,k] . B^T with B stored as [n,k], sequential.
pub fn matmul_nt_seq<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        nt_row(&a[i * k..(i + 1) * k], b, &mut out[i * n..(i + 1) * n], k, n);
    }
}

/// C[m,n] = A[m,k] . B^T with B stored as [n,k]; row-parallel when large.
pub fn matmul_nt<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_MIN_MACS && m > 1 {
            out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
                nt_row(&a[i * k..(i + 1) * k], b, out_row, k, n);
            });
            return;
        }
    }
    matmul_nt_seq(a, b, out, m, k, n);
}

/// C[m,n] = A^T . B with A stored as [k,m]. Used on the backward paths;
/// kept sequential because training parallelism lives at the batch level.
pub fn matmul_tn<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_new_validates_shape() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn randn_matches_across_precisions() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a: Tensor<f32> = Tensor::randn(vec![8], &mut r1);
        let b: Tensor<f64> = Tensor::randn(vec![8], &mut r2);
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert_eq!(*x, *y as f32);
        }
    }

    #[test]
    fn matmul_kernels_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (17, 23, 11);
        let a: Tensor<f64> = Tensor::randn(vec![m, k], &mut rng);
        let b: Tensor<f64> = Tensor::randn(vec![k, n], &mut rng);
        let mut c_seq = vec![0.0; m * n];
        let mut c_par = vec![0.0; m * n];
        matmul_nn_seq(&a.data, &b.data, &mut c_seq, m, k, n);
        matmul_nn(&a.data, &b.data, &mut c_par, m, k, n);
        assert_eq!(c_seq, c_par);

        // nt against nn with an explicitly transposed operand
        let bt: Vec<f64> = {
            let mut t = vec![0.0; k * n];
            for i in 0..k {
                for j in 0..n {
                    t[j * k + i] = b.data[i * n + j];
                }
            }
            t
        };
        let mut c_nt = vec![0.0; m * n];
        matmul_nt(&a.data, &bt, &mut c_nt, m, k, n);
        for (x, y) in c_seq.iter().zip(c_nt.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // tn: A^T stored as [k,m]
        let at: Vec<f64> = {
            let mut t = vec![0.0; k * m];
            for i in 0..m {
                for j in 0..k {
                    t[j * m + i] = a.data[i * k + j];
                }
            }
            t
        };
        let mut c_tn = vec![0.0; m * n];
        matmul_tn(&at, &b.data, &mut c_tn, m, k, n);
        for (x, y) in c_seq.iter().zip(c_tn.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
