//! Floating-point element types the numerical core is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of every [`Tensor`](crate::tensor::Tensor).
///
/// Implemented for `f32` and `f64`. The matrix kernel is routed to the
/// matching `matrixmultiply` routine so generic code stays fast.
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
    /// Short type tag stored in checkpoints.
    const NAME: &'static str;

    /// `c = alpha * a · b + beta * c` with arbitrary row/column strides.
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

    /// `x = exp(x - shift)` over a slice.
    fn exp_shifted(xs: &mut [Self], shift: Self);

    /// Lossless-enough conversion from an `f64` constant.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_gemm_bounds<T>(
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
    buf: &[T],
) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < buf.len(),
        "gemm operand out of bounds"
    );
}

macro_rules! impl_scalar {
    ($ty:ty, $name:expr, $kernel:path, $exp:path) => {
        impl Scalar for $ty {
            const NAME: &'static str = $name;

            fn exp_shifted(xs: &mut [Self], shift: Self) {
                $exp(xs, shift)
            }

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
                check_gemm_bounds(m, k, rsa, csa, a);
                check_gemm_bounds(k, n, rsb, csb, b);
                check_gemm_bounds(m, n, rsc, csc, c);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand was bounds-checked above for the
                // given extents and non-negative strides.
                unsafe {
                    $kernel(
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

fn exp_f64(xs: &mut [f64], shift: f64) {
    const HI: f64 = 709.0;
    const LO: f64 = -708.0;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // 1.5 · 2^52: adding it rounds to an integer held in the low mantissa bits.
    const ROUND: f64 = 6_755_399_441_055_744.0;
    // 1/k! for k = 12 down to 2.
    const P: [f64; 11] = [
        2.087_675_698_786_81e-9,
        2.505_210_838_544_172e-8,
        2.755_731_922_398_589e-7,
        2.755_731_922_398_589_3e-6,
        2.480_158_730_158_730_2e-5,
        1.984_126_984_126_984_1e-4,
        1.388_888_888_888_889e-3,
        8.333_333_333_333_333e-3,
        4.166_666_666_666_666_4e-2,
        1.666_666_666_666_666_6e-1,
        0.5,
    ];
    for x in xs {
        let v = (*x - shift).clamp(LO, HI);
        let m = v * std::f64::consts::LOG2_E + ROUND;
        let nf = m - ROUND;
        let r = v - nf * LN2_HI - nf * LN2_LO;
        let mut p = P[0];
        for c in &P[1..] {
            p = p * r + *c;
        }
        let y = (p * r + 1.0) * r + 1.0;
        let scale = f64::from_bits(m.to_bits().wrapping_add(1023) << 52);
        *x = y * scale;
    }
}

// Cephes-style expf, branch-free so the loop vectorizes.
fn exp_f32(xs: &mut [f32], shift: f32) {
    const HI: f32 = 88.37;
    const LO: f32 = -87.33;
    const C1: f32 = 0.693_359_4;
    const C2: f32 = -2.121_944_4e-4;
    const P: [f32; 6] = [
        1.987_569_2e-4,
        1.398_2e-3,
        8.333_452e-3,
        4.166_579_6e-2,
        1.666_666_5e-1,
        5.000_000_1e-1,
    ];
    for x in xs {
        let v = (*x - shift).clamp(LO, HI);
        let t = v * std::f32::consts::LOG2_E + 0.5;
        let mut n = t as i32;
        n -= ((n as f32) > t) as i32;
        let nf = n as f32;
        let r = v - nf * C1 - nf * C2;
        let mut p = P[0];
        for c in &P[1..] {
            p = p * r + *c;
        }
        let y = p * r * r + r + 1.0;
        *x = y * f32::from_bits(((n + 127) as u32) << 23);
    }
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm, exp_f32);
impl_scalar!(f64, "f64", matrixmultiply::dgemm, exp_f64);
