//! Floating-point abstraction shared by every numeric kernel.
//!
//! Training runs in `f32`; the gradient checks instantiate the same code in
//! `f64`. The only non-generic piece is the GEMM dispatch.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `C = alpha * A·B + beta * C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(span(m, k, rsa, csa) <= a.len());
                assert!(span(k, n, rsb, csb) <= b.len());
                assert!(span(m, n, rsc, csc) <= c.len());
                // SAFETY: the strided extents of all three operands were
                // asserted against the slice lengths above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

/// Row-major matrix product helper: `c[m×n] (+)= op(a) · op(b)`.
///
/// `a` is stored `[m×k]` (or `[k×m]` if `trans_a`), `b` is `[k×n]` (or
/// `[n×k]` if `trans_b`), `c` is `[m×n]`. Panics if any operand is too short.
#[allow(clippy::too_many_arguments)]
pub fn matmul<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    trans_a: bool,
    b: &[S],
    trans_b: bool,
    c: &mut [S],
    accumulate: bool,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    assert!(span(m, k, rsa, csa) <= a.len(), "matmul: lhs too short");
    assert!(span(k, n, rsb, csb) <= b.len(), "matmul: rhs too short");
    assert!(m * n <= c.len(), "matmul: output too short");
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = S::zero());
        }
        return;
    }
    let beta = if accumulate { S::one() } else { S::zero() };
    S::gemm(m, k, n, S::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into<S: Scalar>(logits: &[S], out: &mut [S]) {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// Backward of a row softmax: given `p = softmax(z)` and `dL/dp`, returns `dL/dz`.
pub fn softmax_backward<S: Scalar>(p: &[S], grad_p: &[S], grad_z: &mut [S]) {
    let dot: S = p.iter().zip(grad_p).map(|(&a, &b)| a * b).sum();
    for ((gz, &pi), &gi) in grad_z.iter_mut().zip(p).zip(grad_p) {
        *gz = pi * (gi - dot);
    }
}
