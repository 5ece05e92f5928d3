//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All math is written against [`Scalar`] so that the same code runs in
//! `f64` (the default, see the aliases in the crate root) and `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst};

pub trait Scalar:
    Float
    + FloatConst
    + LinalgScalar
    + ScalarOperand
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
{
    /// Converts an `f64` literal into this scalar type.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn from_usize(n: usize) -> Self {
        Self::lit(n as f64)
    }

    /// Elementwise `tanh`. Hot loop of every conditioner evaluation.
    fn tanh_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.tanh();
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn tanh_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = tanh_f64(*x);
        }
    }
}

/// Branch-free `tanh` for `f64` (absolute error below 5e-16), written so the
/// compiler can vectorize it.
#[inline(always)]
pub fn tanh_f64(x: f64) -> f64 {
    let a = x.abs();
    let y = if a > 350.0 { -700.0 } else { -2.0 * a };
    let e = exp_nonpositive(y);
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// `exp(y)` for `y` in `[-700, 0]` via Cody–Waite reduction and a degree-13
/// Taylor polynomial.
#[inline(always)]
fn exp_nonpositive(y: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    let m = y * LOG2E + MAGIC;
    let k = m - MAGIC;
    let r = y - k * LN2_HI - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let ki = (m.to_bits() as i64).wrapping_sub(MAGIC.to_bits() as i64);
    p * f64::from_bits(((ki + 1023) as u64) << 52)
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// `log(sum(exp(v)))` with max subtraction. Returns `-inf` for an empty slice.
pub fn logsumexp<T: Scalar>(values: &[T]) -> T {
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let sum: T = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Mean and standard error of the mean.
pub fn mean_stderr<T: Scalar>(values: &[T]) -> (T, T) {
    let n = T::from_usize(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    if values.len() < 2 {
        return (mean, T::zero());
    }
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / (n - T::one());
    (mean, (var / n).sqrt())
}
