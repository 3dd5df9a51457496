use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;

use crate::error::{Error, Result};

/// Float type the network can run in: `f32` for training, `f64` for gradient oracles.
pub trait Scalar: Float + Default + Debug + AddAssign + Sum + Send + Sync + 'static {
    /// `c = a · b + beta · c` for row-major matrices; `a` is `m x k`
    /// (stored `k x m` when `a_t`), `b` is `k x n` (stored `n x k` when `b_t`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]);

    fn of_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                // SAFETY: bounds asserted above; strides describe dense row-major buffers.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
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
            }

            #[inline]
            fn of_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor. Feature maps are `(channels, height, width)`,
/// conv weights `(out, in, kh, kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if want != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {want} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(c, h, w)` of a rank-3 feature map.
    pub fn chw(&self) -> (usize, usize, usize) {
        debug_assert_eq!(self.dims.len(), 3);
        (self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
