//! Element types the tensor engine runs on.
//!
//! Everything is generic over [`Scalar`]: `f32` is the production type for
//! forward passes and training, `f64` exists for finite-difference gradient
//! checking, where 32-bit rounding would drown the signal.

use std::sync::Once;

use num_traits::Float;

// Matrix kernels come from the system OpenBLAS. Each call is forced onto a
// single BLAS thread; parallelism happens one level up, over fixed-size
// output chunks, which keeps results bitwise identical for any worker count.
#[link(name = "openblas")]
extern "C" {
    fn cblas_sgemm(
        order: i32, trans_a: i32, trans_b: i32,
        m: i32, n: i32, k: i32,
        alpha: f32, a: *const f32, lda: i32, b: *const f32, ldb: i32,
        beta: f32, c: *mut f32, ldc: i32,
    );
    fn cblas_dgemm(
        order: i32, trans_a: i32, trans_b: i32,
        m: i32, n: i32, k: i32,
        alpha: f64, a: *const f64, lda: i32, b: *const f64, ldb: i32,
        beta: f64, c: *mut f64, ldc: i32,
    );
    fn openblas_set_num_threads(n: i32);
}

const CBLAS_ROW_MAJOR: i32 = 101;
const CBLAS_NO_TRANS: i32 = 111;
const CBLAS_TRANS: i32 = 112;

static BLAS_INIT: Once = Once::new();

/// Pin OpenBLAS to one thread and, when the runtime CPU detection has no
/// model entry for this machine (common inside VMs that mask the CPUID model
/// string), steer it to the right kernel family via `OPENBLAS_CORETYPE`.
fn ensure_blas_ready() {
    BLAS_INIT.call_once(|| {
        if std::env::var_os("OPENBLAS_CORETYPE").is_none() {
            #[cfg(target_arch = "x86_64")]
            {
                let core = if is_x86_feature_detected!("avx512f") {
                    Some("SKYLAKEX")
                } else if is_x86_feature_detected!("avx2") {
                    Some("HASWELL")
                } else {
                    None
                };
                if let Some(core) = core {
                    std::env::set_var("OPENBLAS_CORETYPE", core);
                }
            }
        }
        unsafe { openblas_set_num_threads(1) };
    });
}

/// Floating-point element of a [`crate::tensor::Tensor`].
pub trait Scalar: Float + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * op(a) * op(b) + beta * c` on row-major matrices, where
    /// `op` transposes when the corresponding flag is set and the logical
    /// product is `m x k` times `k x n`.
    ///
    /// # Safety
    /// `a`, `b` and `c` must point to matrices with at least the implied
    /// number of elements given their leading dimensions.
    unsafe fn gemm(
        trans_a: bool, trans_b: bool,
        m: usize, k: usize, n: usize,
        alpha: Self, a: *const Self, lda: usize, b: *const Self, ldb: usize,
        beta: Self, c: *mut Self, ldc: usize,
    );
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        trans_a: bool, trans_b: bool,
        m: usize, k: usize, n: usize,
        alpha: Self, a: *const Self, lda: usize, b: *const Self, ldb: usize,
        beta: Self, c: *mut Self, ldc: usize,
    ) {
        ensure_blas_ready();
        cblas_sgemm(
            CBLAS_ROW_MAJOR,
            if trans_a { CBLAS_TRANS } else { CBLAS_NO_TRANS },
            if trans_b { CBLAS_TRANS } else { CBLAS_NO_TRANS },
            m as i32, n as i32, k as i32,
            alpha, a, lda as i32, b, ldb as i32,
            beta, c, ldc as i32,
        );
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        trans_a: bool, trans_b: bool,
        m: usize, k: usize, n: usize,
        alpha: Self, a: *const Self, lda: usize, b: *const Self, ldb: usize,
        beta: Self, c: *mut Self, ldc: usize,
    ) {
        ensure_blas_ready();
        cblas_dgemm(
            CBLAS_ROW_MAJOR,
            if trans_a { CBLAS_TRANS } else { CBLAS_NO_TRANS },
            if trans_b { CBLAS_TRANS } else { CBLAS_NO_TRANS },
            m as i32, n as i32, k as i32,
            alpha, a, lda as i32, b, ldb as i32,
            beta, c, ldc as i32,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        // 2x3 * 3x2
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f32, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f32; 4];
        unsafe {
            f32::gemm(false, false, 2, 3, 2, 1.0, a.as_ptr(), 3, b.as_ptr(), 2, 0.0, c.as_mut_ptr(), 2);
        }
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transpose_b() {
        // 2x3 * (2x3)^T = 2x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 1.0, 1.0, 2.0, 2.0, 2.0];
        let mut c = [0.0f64; 4];
        unsafe {
            f64::gemm(false, true, 2, 3, 2, 1.0, a.as_ptr(), 3, b.as_ptr(), 3, 0.0, c.as_mut_ptr(), 2);
        }
        assert_eq!(c, [6.0, 12.0, 15.0, 30.0]);
    }
}
