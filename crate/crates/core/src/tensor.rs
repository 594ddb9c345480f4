//! Dense row-major tensors and the scalar abstraction shared by all numeric code.
//!
//! Training runs in f32; f64 is available for gradient checking. Matrix
//! products go through [`par_gemm`], which splits output rows into fixed-size
//! blocks so results are bit-identical regardless of thread count.

use std::fmt;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("dimension mismatch in {op}: {detail}")]
    Dim { op: &'static str, detail: String },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("gradient contains NaN/Inf; optimizer step rejected")]
    NanGradient,
    #[error("invalid optimizer hyperparameter: {0}")]
    Hyper(&'static str),
}

/// Float type usable in tensors: f32 for training, f64 for gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// C[m,n] = A·B + beta·C over strided views, single block, single thread.
    ///
    /// # Safety
    /// Pointers must cover every element reachable through the given strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_config(x: f64) -> Self {
        Self::from_f64(x).expect("finite config constant")
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense row-major tensor. Plain storage; gradients live on tape nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() || shape.contains(&0) {
            return Err(TensorError::ShapeData {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform(lo, hi) fill; the standard init for hidden layers.
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, lo: T, hi: T, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let span = hi - lo;
        let data = (0..n)
            .map(|_| lo + span * T::from_f64(rng.random::<f64>()).unwrap())
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, new shape; element count must match.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>();
        if expected != self.data.len() {
            return Err(TensorError::ShapeData {
                shape,
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64().unwrap()).collect(),
        }
    }
}

impl Tensor<f64> {
    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

#[derive(Clone, Copy)]
struct ConstPtr<T>(*const T);
unsafe impl<T> Send for ConstPtr<T> {}
unsafe impl<T> Sync for ConstPtr<T> {}

impl<T> ConstPtr<T> {
    /// Taking `self` whole keeps closures from capturing the bare pointer
    /// field and losing the Send/Sync wrapper.
    fn get(self) -> *const T {
        self.0
    }
}

/// Rows per parallel block. Fixed so the block split (and thus each output
/// element's summation path) never depends on the number of worker threads.
const GEMM_BLOCK_ROWS: usize = 256;

/// C[m,n] (contiguous row-major) = A·B + beta·C for strided A and B.
///
/// Output rows are processed in fixed blocks of [`GEMM_BLOCK_ROWS`]; each
/// block is one single-threaded kernel call writing a disjoint slice of C.
#[allow(clippy::too_many_arguments)]
pub(crate) fn par_gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(c.len(), m * n, "gemm output buffer size");
    debug_assert!(max_offset(m, k, rsa, csa) < a.len(), "A view out of bounds");
    debug_assert!(max_offset(k, n, rsb, csb) < b.len(), "B view out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if m <= GEMM_BLOCK_ROWS {
        unsafe {
            T::gemm(
                m,
                k,
                n,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    use rayon::prelude::*;
    let pa = ConstPtr(a.as_ptr());
    let pb = ConstPtr(b.as_ptr());
    c.par_chunks_mut(GEMM_BLOCK_ROWS * n)
        .enumerate()
        .for_each(move |(bi, chunk)| {
            let row0 = bi * GEMM_BLOCK_ROWS;
            let rows = chunk.len() / n;
            unsafe {
                T::gemm(
                    rows,
                    k,
                    n,
                    pa.get().offset(row0 as isize * rsa),
                    rsa,
                    csa,
                    pb.get(),
                    rsb,
                    csb,
                    beta,
                    chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
}
