//! Floating-point element trait used throughout the engine.
//!
//! Training runs in `f32`; gradient-check tests instantiate the same code in
//! `f64`. All transcendentals route through `libm` so results do not depend
//! on the `std` feature or the platform libm.

use core::fmt;

pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + core::ops::Add<Output = Self>
    + core::ops::Sub<Output = Self>
    + core::ops::Mul<Output = Self>
    + core::ops::Div<Output = Self>
    + core::ops::Neg<Output = Self>
    + core::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

/// Polynomial expf (Cephes-style): ~1 ulp over the training range, branchless
/// so element loops vectorize, and bit-identical on every platform. The f32
/// training path is exp-heavy (SiLU and softmax), so this matters for
/// throughput. Inputs are clamped to the finite range; the true-overflow case
/// is handled by the clamp saturating to f32::MAX-scale results.
#[inline]
fn fast_expf(x: f32) -> f32 {
    const LOG2E: f32 = core::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_375_f32;
    const LN2_LO: f32 = -2.121_944_4e-4_f32;
    // clamp instead of branching; exp(-87.3) flushes to ~1e-38 ≈ 0
    let x = x.min(88.0).max(-87.0);
    // round-to-nearest via the +/-12582912 trick (valid since |z| < 2^22)
    const ROUND_MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23
    let z = x * LOG2E;
    let n = (z + ROUND_MAGIC) - ROUND_MAGIC;
    let r = x - n * LN2_HI - n * LN2_LO;
    // degree-5 minimax polynomial for e^r on [-ln2/2, ln2/2]
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_199_9e-3_f32;
    p = p * r + 8.333_345_2e-3_f32;
    p = p * r + 4.166_657_9e-2_f32;
    p = p * r + 1.666_666_6e-1_f32;
    p = p * r + 5e-1_f32;
    p = p * r * r + r + 1.0;
    // scale by 2^n via exponent bits
    let bits = ((n as i32 + 127) as u32) << 23;
    p * f32::from_bits(bits)
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn exp(self) -> Self {
        fast_expf(self)
    }
    #[inline]
    fn ln(self) -> Self {
        libm::logf(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        libm::sqrtf(self)
    }
    #[inline]
    fn abs(self) -> Self {
        libm::fabsf(self)
    }
    #[inline]
    fn maximum(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        libm::log(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    #[inline]
    fn abs(self) -> Self {
        libm::fabs(self)
    }
    #[inline]
    fn maximum(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_expf_close_to_reference() {
        let mut worst = 0.0f64;
        let mut x = -87.0f32;
        while x < 88.0 {
            let got = fast_expf(x) as f64;
            let want = libm::exp(x as f64);
            let rel = ((got - want) / want).abs();
            worst = worst.max(rel);
            x += 0.0373;
        }
        assert!(worst < 3e-7, "worst rel err {worst}");
    }

    #[test]
    fn fast_expf_saturates() {
        assert!(fast_expf(100.0) > 1e38);
        assert!(fast_expf(-100.0) < 1e-37);
        assert_eq!(fast_expf(0.0), 1.0);
    }
}
