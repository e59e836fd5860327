//! Double-double arithmetic: an unevaluated sum `hi + lo` of two `f64`s with
//! about 106 bits of significand. Used as the reference precision for
//! finite-difference gradient checks, where plain `f64` differences cannot
//! resolve partials much below `1e-11`.
//!
//! `exp`, `ln`, `sqrt` and everything built on them are carried at full
//! precision. Trigonometric functions round through `f64`; nothing in the
//! loss code calls them.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::linalg::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DoubleDouble {
    hi: f64,
    lo: f64,
}

const LN2: DoubleDouble = DoubleDouble {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};
const LN10: DoubleDouble = DoubleDouble {
    hi: std::f64::consts::LN_10,
    lo: -2.170_756_223_382_249_4e-16,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DoubleDouble {
    pub const fn from_f64(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        if !hi.is_finite() {
            return Self { hi, lo: 0.0 };
        }
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Self {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    fn mul_f64(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        Self::renorm(p, e + self.lo * b)
    }

    /// `exp(r) - 1` for `|r| <= ln 2 / 2`: Taylor series on `r / 2^10`,
    /// then ten doublings of the form `2s + s^2`.
    fn expm1_reduced(r: Self) -> Self {
        let x = r.ldexp(-10);
        let mut term = x;
        let mut sum = x;
        for n in 2..=14 {
            term = term * x / Self::from_f64(n as f64);
            sum += term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        for _ in 0..10 {
            sum = sum.ldexp(1) + sum * sum;
        }
        sum
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, b: Self) -> Self {
        let (s, e) = two_sum(self.hi, b.hi);
        if !s.is_finite() {
            return Self { hi: s, lo: 0.0 };
        }
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Self::renorm(s, e + f)
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, b: Self) -> Self {
        self + (-b)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        if !p.is_finite() {
            return Self { hi: p, lo: 0.0 };
        }
        Self::renorm(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        if !q1.is_finite() || b.hi == 0.0 {
            return Self::from_f64(q1);
        }
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Self { hi: q1, lo: q2 } + Self::from_f64(q3)
    }
}

impl Rem for DoubleDouble {
    type Output = Self;
    fn rem(self, b: Self) -> Self {
        self - (self / b).trunc() * b
    }
}

macro_rules! assign_op {
    ($tr:ident, $m:ident, $op:tt) => {
        impl $tr for DoubleDouble {
            fn $m(&mut self, b: Self) {
                *self = *self $op b;
            }
        }
    };
}
assign_op!(AddAssign, add_assign, +);
assign_op!(SubAssign, sub_assign, -);
assign_op!(MulAssign, mul_assign, *);
assign_op!(DivAssign, div_assign, /);
assign_op!(RemAssign, rem_assign, %);

impl PartialOrd for DoubleDouble {
    fn partial_cmp(&self, b: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&b.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&b.lo),
            o => Some(o),
        }
    }
}

impl Sum for DoubleDouble {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), |a, b| a + b)
    }
}

impl fmt::Display for DoubleDouble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.hi, f)
    }
}

impl Zero for DoubleDouble {
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for DoubleDouble {
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Num for DoubleDouble {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::from_f64)
    }
}

impl ToPrimitive for DoubleDouble {
    fn to_i64(&self) -> Option<i64> {
        let t = self.trunc();
        Some(t.hi.to_i64()?.checked_add(t.lo.to_i64()?)?)
    }
    fn to_u64(&self) -> Option<u64> {
        u64::try_from(self.to_i64()?).ok()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl FromPrimitive for DoubleDouble {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        let lo = (<i128 as std::convert::From<_>>::from(n) - hi as i128) as f64;
        Some(Self::renorm(hi, lo))
    }
    fn from_u64(n: u64) -> Option<Self> {
        let hi = n as f64;
        let lo = (<i128 as std::convert::From<_>>::from(n) - hi as i128) as f64;
        Some(Self::renorm(hi, lo))
    }
    fn from_f64(v: f64) -> Option<Self> {
        Some(Self::from_f64(v))
    }
}

impl NumCast for DoubleDouble {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Self::from_f64)
    }
}

macro_rules! via_f64 {
    ($($m:ident),*) => {
        $(fn $m(self) -> Self {
            Self::from_f64(self.hi.$m())
        })*
    };
}

impl Float for DoubleDouble {
    fn nan() -> Self {
        Self::from_f64(f64::NAN)
    }
    fn infinity() -> Self {
        Self::from_f64(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Self::from_f64(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Self::from_f64(-0.0)
    }
    fn min_value() -> Self {
        Self::from_f64(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Self::from_f64(f64::MIN_POSITIVE)
    }
    fn epsilon() -> Self {
        Self::from_f64(2f64.powi(-104))
    }
    fn max_value() -> Self {
        Self::from_f64(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.hi.is_nan() || self.lo.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite() && self.lo.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn floor(self) -> Self {
        let hi = self.hi.floor();
        if hi == self.hi {
            Self::renorm(hi, self.lo.floor())
        } else {
            Self::from_f64(hi)
        }
    }
    fn ceil(self) -> Self {
        -(-self).floor()
    }
    fn round(self) -> Self {
        if self.hi < 0.0 {
            -(-self).round()
        } else {
            (self + Self::from_f64(0.5)).floor()
        }
    }
    fn trunc(self) -> Self {
        if self.hi < 0.0 {
            self.ceil()
        } else {
            self.floor()
        }
    }
    fn fract(self) -> Self {
        self - self.trunc()
    }
    fn abs(self) -> Self {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Self::from_f64(self.hi.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Self::one() / self
    }
    fn powi(self, n: i32) -> Self {
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = Self::one();
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base *= base;
            e >>= 1;
        }
        acc
    }
    fn powf(self, n: Self) -> Self {
        if self.is_zero() {
            return if n.hi > 0.0 { Self::zero() } else { Self::from_f64(self.hi.powf(n.hi)) };
        }
        (n * self.ln()).exp()
    }
    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::from_f64(self.hi.sqrt());
        }
        let x = self.hi.sqrt();
        let (p, e) = two_prod(x, x);
        let r = self - Self::renorm(p, e);
        Self::from_f64(x) + Self::from_f64(r.hi / (2.0 * x))
    }
    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Self::infinity();
        }
        if self.hi < -745.0 {
            return Self::zero();
        }
        let k = (self.hi / LN2.hi).round();
        let r = self - LN2.mul_f64(k);
        (Self::one() + Self::expm1_reduced(r)).ldexp(k as i32)
    }
    fn exp2(self) -> Self {
        (self * LN2).exp()
    }
    fn ln(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Self::from_f64(self.hi.ln());
        }
        // one Newton step on exp(x) = a from the f64 estimate
        let x = Self::from_f64(self.hi.ln());
        x + self * (-x).exp() - Self::one()
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.ln() / LN2
    }
    fn log10(self) -> Self {
        self.ln() / LN10
    }
    fn max(self, b: Self) -> Self {
        if self.is_nan() || b > self {
            b
        } else {
            self
        }
    }
    fn min(self, b: Self) -> Self {
        if self.is_nan() || b < self {
            b
        } else {
            self
        }
    }
    fn abs_sub(self, b: Self) -> Self {
        if self > b {
            self - b
        } else {
            Self::zero()
        }
    }
    fn cbrt(self) -> Self {
        if self.is_zero() || !self.is_finite() {
            return self;
        }
        let x = Self::from_f64(self.hi.cbrt());
        x + (self / (x * x) - x) / Self::from_f64(3.0)
    }
    fn hypot(self, b: Self) -> Self {
        (self * self + b * b).sqrt()
    }
    via_f64!(sin, cos, tan, asin, acos, atan);
    fn atan2(self, b: Self) -> Self {
        Self::from_f64(self.hi.atan2(b.hi))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        if self.hi.abs() <= 0.5 * LN2.hi {
            Self::expm1_reduced(self)
        } else {
            self.exp() - Self::one()
        }
    }
    fn ln_1p(self) -> Self {
        let y = Self::one() + self;
        if y.hi <= 0.0 {
            return Self::from_f64(self.hi.ln_1p());
        }
        let x = Self::from_f64(self.hi.ln_1p());
        // Newton step written as x + (1 + a) e^-x - 1 = x + a e^-x + expm1(-x)
        x + self * (-x).exp() + (-x).exp_m1()
    }
    fn sinh(self) -> Self {
        let e = self.exp();
        (e - e.recip()).ldexp(-1)
    }
    fn cosh(self) -> Self {
        let e = self.exp();
        (e + e.recip()).ldexp(-1)
    }
    fn tanh(self) -> Self {
        if self.hi.abs() > 40.0 {
            return Self::from_f64(self.hi.signum());
        }
        let m = self.ldexp(1).exp_m1();
        m / (m + Self::from_f64(2.0))
    }
    fn asinh(self) -> Self {
        (self + (self * self + Self::one()).sqrt()).ln()
    }
    fn acosh(self) -> Self {
        (self + (self * self - Self::one()).sqrt()).ln()
    }
    fn atanh(self) -> Self {
        ((Self::one() + self) / (Self::one() - self)).ln().ldexp(-1)
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Real for DoubleDouble {}

#[cfg(test)]
mod tests {
    use super::*;

    fn dd(hi: f64, lo: f64) -> DoubleDouble {
        DoubleDouble { hi, lo }
    }

    fn close(a: DoubleDouble, b: DoubleDouble, tol: f64) -> bool {
        let d = (a - b).abs();
        d.hi <= tol * b.abs().hi.max(1e-300)
    }

    #[test]
    fn one_third_times_three_is_one() {
        let third = DoubleDouble::one() / DoubleDouble::from_f64(3.0);
        let back = third * DoubleDouble::from_f64(3.0);
        assert!((back - DoubleDouble::one()).abs().hi < 1e-31);
        assert!(third.lo != 0.0);
    }

    #[test]
    fn exp_one_matches_reference() {
        let e = dd(2.718_281_828_459_045, 1.445_646_891_729_250_2e-16);
        assert!(close(DoubleDouble::one().exp(), e, 1e-30));
    }

    #[test]
    fn ln_two_matches_reference() {
        assert!(close(DoubleDouble::from_f64(2.0).ln(), LN2, 1e-30));
    }

    #[test]
    fn exp_and_ln_invert() {
        for v in [-30.0, -2.5, -1e-9, 1e-12, 0.3, 7.0, 100.0] {
            let x = DoubleDouble::from_f64(v);
            assert!(close(x.exp().ln(), x, 1e-29), "{v}");
        }
    }

    #[test]
    fn sqrt_two_squared() {
        let r = DoubleDouble::from_f64(2.0).sqrt();
        assert!(close(r * r, DoubleDouble::from_f64(2.0), 1e-31));
    }

    #[test]
    fn ln_1p_keeps_small_arguments() {
        let x = DoubleDouble::from_f64(1e-20);
        let l = x.ln_1p();
        assert!(close(l, x - x * x.ldexp(-1), 1e-28));
    }

    #[test]
    fn tanh_is_odd_and_bounded() {
        let x = DoubleDouble::from_f64(0.7);
        assert!(close(x.tanh(), -(-x).tanh(), 1e-31));
        assert!((x.tanh().hi - 0.7f64.tanh()).abs() < 1e-15);
        assert_eq!(DoubleDouble::from_f64(50.0).tanh(), DoubleDouble::one());
    }

    #[test]
    fn powf_agrees_with_f64() {
        let v = DoubleDouble::from_f64(1.7).powf(DoubleDouble::from_f64(2.5));
        assert!((v.hi - 1.7f64.powf(2.5)).abs() < 1e-14);
    }

    #[test]
    fn ordering_uses_low_word() {
        assert!(dd(1.0, 1e-20) > DoubleDouble::one());
        assert_eq!(dd(1.0, 1e-20).max(DoubleDouble::one()), dd(1.0, 1e-20));
    }
}
