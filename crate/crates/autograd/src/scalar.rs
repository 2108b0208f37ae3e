use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

/// Floating point element type. Training runs in `f32`; gradient checks
/// run the same code paths in `f64`.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Row-major `c = a · b + beta · c` where `a` is `m×k` and `b` is `k×n`.
    /// `trans_a`/`trans_b` read the stored buffer transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical (rows × cols) view over a buffer stored either as rows×cols or cols×rows
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs buffer too small");
                assert!(b.len() >= k * n, "gemm: rhs buffer too small");
                assert!(c.len() >= m * n, "gemm: output buffer too small");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: buffer extents were checked above against the logical shapes and
                // the strides never address beyond m*k, k*n and m*n elements respectively.
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
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
