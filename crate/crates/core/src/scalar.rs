//! Scalar abstraction shared by the tensor engine and every model component.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real floating-point scalar the model can be instantiated over (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; panics only for types that cannot represent finite `f64`s.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("scalar conversion from f64")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar conversion to f64")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::of(v as f64)
    }

    /// `c += a * b` for strided `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
    /// Each output row depends only on its own row of `a`.
    fn gemm(
        dims: [usize; 3],
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        c: (&mut [Self], isize, isize),
    );
}

macro_rules! blocked_gemm {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                dims: [usize; 3],
                a: (&[$t], isize, isize),
                b: (&[$t], isize, isize),
                c: (&mut [$t], isize, isize),
            ) {
                let [m, k, n] = dims;
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
                    }
                };
                assert!(a.0.len() >= span(m, k, a.1, a.2) && b.0.len() >= span(k, n, b.1, b.2));
                assert!(c.0.len() >= span(m, n, c.1, c.2));
                // SAFETY: the asserts above keep every strided access in bounds.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        1.0,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    )
                }
            }
        }
    };
}

blocked_gemm!(f32, matrixmultiply::sgemm);
blocked_gemm!(f64, matrixmultiply::dgemm);
