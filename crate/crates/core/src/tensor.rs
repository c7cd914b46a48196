//! Dense row-major tensors and the scalar abstraction shared by the 32-bit
//! training path and the 64-bit gradient-check path.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar with a matrix-multiply kernel.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// `c = alpha * a @ b + beta * c` over strided matrices
    /// (`a` is m×k, `b` is k×n, `c` is m×n).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! real_impl {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(span(m, k, a_strides) <= a.len());
                debug_assert!(span(k, n, b_strides) <= b.len());
                debug_assert!(span(m, n, c_strides) <= c.len());
                // SAFETY: the debug assertions above spell out the bounds every
                // caller upholds; all strides are non-negative.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    )
                }
            }
        }
    };
}

real_impl!(f32, matrixmultiply::sgemm);
real_impl!(f64, matrixmultiply::dgemm);

fn span(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize + 1
}

/// Row-major matrix product helper: `c[m,n] (+)= a[m,k] @ b[k,n]`, all contiguous.
pub fn matmul_into<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F], acc: bool) {
    let beta = if acc { F::one() } else { F::zero() };
    F::gemm(
        m,
        k,
        n,
        F::one(),
        a,
        (k as isize, 1),
        b,
        (n as isize, 1),
        beta,
        c,
        (n as isize, 1),
    );
}

/// `c[m,n] (+)= a[k,m]^T @ b[k,n]`.
pub fn matmul_tn_into<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F], acc: bool) {
    let beta = if acc { F::one() } else { F::zero() };
    F::gemm(
        m,
        k,
        n,
        F::one(),
        a,
        (1, m as isize),
        b,
        (n as isize, 1),
        beta,
        c,
        (n as isize, 1),
    );
}

/// `c[m,n] (+)= a[m,k] @ b[n,k]^T`.
pub fn matmul_nt_into<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F], acc: bool) {
    let beta = if acc { F::one() } else { F::zero() };
    F::gemm(
        m,
        k,
        n,
        F::one(),
        a,
        (k as isize, 1),
        b,
        (1, k as isize),
        beta,
        c,
        (n as isize, 1),
    );
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: F) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    /// Converts element type, e.g. between the 32-bit and 64-bit paths.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive_products() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul_into(2, 3, 4, &a, &b, &mut c, false);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T where a is stored 3x2
        let at: Vec<f64> = (0..3).flat_map(|p| (0..2).map(move |i| (i * 3 + p) as f64 + 1.0)).collect();
        let mut c2 = vec![0.0; 8];
        matmul_tn_into(2, 3, 4, &at, &b, &mut c2, false);
        assert_eq!(c, c2);
        // b^T stored 4x3
        let bt: Vec<f64> = (0..4).flat_map(|j| (0..3).map(move |p| ((p * 4 + j) as f64) * 0.5 - 2.0)).collect();
        let mut c3 = vec![1.0; 8];
        matmul_nt_into(2, 3, 4, &a, &bt, &mut c3, true);
        for (x, y) in c3.iter().zip(&c) {
            assert_eq!(*x, y + 1.0);
        }
    }

    #[test]
    fn cast_round_trips_exact_f32_values() {
        let t = Tensor::<f32>::from_vec(&[3], vec![0.1, -2.5, 7.0]);
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}
