//! Scalar abstraction over the two numeric modes: `f32` for training and
//! rendering, `f64` for derivative verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Real:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `(sin x, cos x)`. The `f32` implementation is a branch-free polynomial
    /// so that loops over activations vectorize; `f64` uses libm.
    fn sin_cos_fast(x: Self) -> (Self, Self);

    /// `s = sin(ω x)`, `c = cos(ω x)` over a slice.
    fn sin_cos_slice(omega: Self, x: &[Self], s: &mut [Self], c: &mut [Self]) {
        for ((x, s), c) in x.iter().zip(s.iter_mut()).zip(c.iter_mut()) {
            let (a, b) = Self::sin_cos_fast(omega * *x);
            *s = a;
            *c = b;
        }
    }

    /// In-place `x = sin(ω x)`.
    fn sin_slice(omega: Self, x: &mut [Self]) {
        for v in x.iter_mut() {
            *v = Self::sin_cos_fast(omega * *v).0;
        }
    }

    /// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c` with explicit row/column strides.
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
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn sin_cos_fast(x: Self) -> (Self, Self) {
        x.sin_cos()
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
        if m == 0 || n == 0 {
            return;
        }
        check_extent(m, k, rsa, csa, a.len());
        check_extent(k, n, rsb, csb, b.len());
        check_extent(m, n, rsc, csc, c.len());
        // SAFETY: extents were checked against the slice lengths above.
        unsafe {
            matrixmultiply::dgemm(
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

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn sin_cos_fast(x: Self) -> (Self, Self) {
        sin_cos_f32(x)
    }

    fn sin_cos_slice(omega: Self, x: &[Self], s: &mut [Self], c: &mut [Self]) {
        sin_cos_slice_f32(omega, x, s, c)
    }

    fn sin_slice(omega: Self, x: &mut [Self]) {
        sin_slice_f32(omega, x)
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
        if m == 0 || n == 0 {
            return;
        }
        check_extent(m, k, rsa, csa, a.len());
        check_extent(k, n, rsb, csb, b.len());
        check_extent(m, n, rsc, csc, c.len());
        // SAFETY: extents were checked against the slice lengths above.
        unsafe {
            matrixmultiply::sgemm(
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

fn check_extent(rows: usize, cols: usize, rs: isize, cs: isize, len: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm operand out of bounds: {last} >= {len}");
}

/// Polynomial sine/cosine for `f32`, within 2e-6 of libm for |x| ≲ 1e4.
///
/// Cody–Waite reduction by π/2 followed by minimax polynomials on
/// [−π/4, π/4]. Quadrant selection is arithmetic so loops vectorize.
#[inline(always)]
pub fn sin_cos_f32(x: f32) -> (f32, f32) {
    const TWO_OVER_PI: f32 = std::f32::consts::FRAC_2_PI;
    const P1: f32 = 1.570_312_5;
    const P2: f32 = 4.837_512_969_970_703e-4;
    const P3: f32 = 7.549_789_954_891_815e-8;
    // round to nearest via the 1.5·2²³ trick (valid for |x| < 2²²)
    const SHIFT: f32 = 12_582_912.0;

    let shifted = x * TWO_OVER_PI + SHIFT;
    let q = shifted - SHIFT;
    // SHIFT is a multiple of 4, so the low mantissa bits hold q mod 4
    let qi = (shifted.to_bits() & 3) as i32;
    let r = ((x - q * P1) - q * P2) - q * P3;
    let r2 = r * r;

    let s = r + r * r2 * (-1.666_665_5e-1 + r2 * (8.332_161e-3 + r2 * -1.951_529_6e-4));
    let c = 1.0 - 0.5 * r2 + r2 * r2 * (4.166_664_6e-2 + r2 * (-1.388_731_6e-3 + r2 * 2.443_315_7e-5));

    let swap = qi & 1 != 0;
    let sb = if swap { c } else { s };
    let cb = if swap { s } else { c };
    let sin_sign = ((qi & 2) as u32) << 30;
    let cos_sign = (((qi + 1) & 2) as u32) << 30;
    (
        f32::from_bits(sb.to_bits() ^ sin_sign),
        f32::from_bits(cb.to_bits() ^ cos_sign),
    )
}

#[inline(always)]
fn sin_cos_slice_body(omega: f32, x: &[f32], s: &mut [f32], c: &mut [f32]) {
    for ((x, s), c) in x.iter().zip(s.iter_mut()).zip(c.iter_mut()) {
        let (a, b) = sin_cos_f32(omega * *x);
        *s = a;
        *c = b;
    }
}

#[inline(always)]
fn sin_slice_body(omega: f32, x: &mut [f32]) {
    for v in x.iter_mut() {
        *v = sin_cos_f32(omega * *v).0;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn sin_cos_slice_avx2(omega: f32, x: &[f32], s: &mut [f32], c: &mut [f32]) {
    sin_cos_slice_body(omega, x, s, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn sin_slice_avx2(omega: f32, x: &mut [f32]) {
    sin_slice_body(omega, x)
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `s = sin(ω x)`, `c = cos(ω x)` elementwise. Wider SIMD only changes
/// speed: no fused multiply-add is enabled, so results are identical.
pub fn sin_cos_slice_f32(omega: f32, x: &[f32], s: &mut [f32], c: &mut [f32]) {
    assert!(s.len() == x.len() && c.len() == x.len());
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { sin_cos_slice_avx2(omega, x, s, c) };
    }
    sin_cos_slice_body(omega, x, s, c)
}

/// In-place `x = sin(ω x)`.
pub fn sin_slice_f32(omega: f32, x: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { sin_slice_avx2(omega, x) };
    }
    sin_slice_body(omega, x)
}
