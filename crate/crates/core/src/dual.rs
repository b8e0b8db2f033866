//! Forward-mode dual numbers.
//!
//! `Dual { re, d }` carries a value and the derivative of that value along
//! one direction. Running any [`Scalar`]-generic routine on duals yields the
//! routine's directional derivative exactly (to machine precision). The MAML
//! path uses this on top of the reverse-mode gradient: evaluating the
//! gradient at `theta + eps * v` produces the Hessian-vector product `H v`
//! in the tangent slots.
//!
//! Comparisons (`==`, `<`) look at the value part only, so branch decisions
//! made by generic code (ReLU masks, softmax max-shift) match the plain
//! evaluation bit for bit.

use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct Dual<S> {
    /// Value part.
    pub re: S,
    /// Tangent part (derivative along the seeded direction).
    pub d: S,
}

pub type Dual64 = Dual<f64>;

impl<S: Scalar> Dual<S> {
    pub fn new(re: S, d: S) -> Self {
        Dual { re, d }
    }

    /// A constant: tangent zero.
    pub fn constant(re: S) -> Self {
        Dual { re, d: S::zero() }
    }

    /// A variable seeded with tangent `d`.
    pub fn seeded(re: S, d: S) -> Self {
        Dual { re, d }
    }
}

impl<S: Scalar> Default for Dual<S> {
    fn default() -> Self {
        Dual::constant(S::zero())
    }
}

impl<S: Scalar> fmt::Display for Dual<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}eps", self.re, self.d)
    }
}

impl<S: Scalar> PartialEq for Dual<S> {
    fn eq(&self, other: &Self) -> bool {
        self.re == other.re
    }
}

impl<S: Scalar> PartialOrd for Dual<S> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<S: Scalar> Neg for Dual<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.d)
    }
}

impl<S: Scalar> Add for Dual<S> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Dual::new(self.re + rhs.re, self.d + rhs.d)
    }
}

impl<S: Scalar> Sub for Dual<S> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Dual::new(self.re - rhs.re, self.d - rhs.d)
    }
}

impl<S: Scalar> Mul for Dual<S> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Dual::new(self.re * rhs.re, self.d * rhs.re + self.re * rhs.d)
    }
}

impl<S: Scalar> Div for Dual<S> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let v = self.re / rhs.re;
        Dual::new(v, (self.d - v * rhs.d) / rhs.re)
    }
}

impl<S: Scalar> Rem for Dual<S> {
    type Output = Self;
    fn rem(self, rhs: Self) -> Self {
        // x % y = x - trunc(x/y) * y with the quotient treated as constant.
        let q = (self.re / rhs.re).trunc();
        Dual::new(self.re % rhs.re, self.d - q * rhs.d)
    }
}

impl<S: Scalar> AddAssign for Dual<S> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<S: Scalar> SubAssign for Dual<S> {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<S: Scalar> MulAssign for Dual<S> {
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<S: Scalar> DivAssign for Dual<S> {
    fn div_assign(&mut self, rhs: Self) {
        *self = *self / rhs;
    }
}

impl<S: Scalar> RemAssign for Dual<S> {
    fn rem_assign(&mut self, rhs: Self) {
        *self = *self % rhs;
    }
}

impl<S: Scalar> Zero for Dual<S> {
    fn zero() -> Self {
        Dual::constant(S::zero())
    }

    fn is_zero(&self) -> bool {
        self.re.is_zero()
    }
}

impl<S: Scalar> One for Dual<S> {
    fn one() -> Self {
        Dual::constant(S::one())
    }
}

impl<S: Scalar> Sum for Dual<S> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), |a, b| a + b)
    }
}

impl<S: Scalar> ToPrimitive for Dual<S> {
    fn to_i64(&self) -> Option<i64> {
        self.re.to_i64()
    }

    fn to_u64(&self) -> Option<u64> {
        self.re.to_u64()
    }

    fn to_f64(&self) -> Option<f64> {
        self.re.to_f64()
    }
}

impl<S: Scalar> FromPrimitive for Dual<S> {
    fn from_i64(n: i64) -> Option<Self> {
        S::from_i64(n).map(Dual::constant)
    }

    fn from_u64(n: u64) -> Option<Self> {
        S::from_u64(n).map(Dual::constant)
    }

    fn from_f64(n: f64) -> Option<Self> {
        S::from_f64(n).map(Dual::constant)
    }
}

impl<S: Scalar> NumCast for Dual<S> {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        <S as NumCast>::from(n).map(Dual::constant)
    }
}

impl<S: Scalar> Num for Dual<S> {
    type FromStrRadixErr = <S as Num>::FromStrRadixErr;

    fn from_str_radix(str: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        S::from_str_radix(str, radix).map(Dual::constant)
    }
}

impl<S: Scalar> Float for Dual<S> {
    fn nan() -> Self {
        Dual::constant(S::nan())
    }

    fn infinity() -> Self {
        Dual::constant(S::infinity())
    }

    fn neg_infinity() -> Self {
        Dual::constant(S::neg_infinity())
    }

    fn neg_zero() -> Self {
        Dual::constant(S::neg_zero())
    }

    fn min_value() -> Self {
        Dual::constant(S::min_value())
    }

    fn min_positive_value() -> Self {
        Dual::constant(S::min_positive_value())
    }

    fn max_value() -> Self {
        Dual::constant(S::max_value())
    }

    fn epsilon() -> Self {
        Dual::constant(S::epsilon())
    }

    fn is_nan(self) -> bool {
        self.re.is_nan()
    }

    fn is_infinite(self) -> bool {
        self.re.is_infinite()
    }

    fn is_finite(self) -> bool {
        self.re.is_finite()
    }

    fn is_normal(self) -> bool {
        self.re.is_normal()
    }

    fn classify(self) -> FpCategory {
        self.re.classify()
    }

    fn floor(self) -> Self {
        Dual::constant(self.re.floor())
    }

    fn ceil(self) -> Self {
        Dual::constant(self.re.ceil())
    }

    fn round(self) -> Self {
        Dual::constant(self.re.round())
    }

    fn trunc(self) -> Self {
        Dual::constant(self.re.trunc())
    }

    fn fract(self) -> Self {
        Dual::new(self.re.fract(), self.d)
    }

    fn abs(self) -> Self {
        Dual::new(self.re.abs(), self.d * self.re.signum())
    }

    fn signum(self) -> Self {
        Dual::constant(self.re.signum())
    }

    fn is_sign_positive(self) -> bool {
        self.re.is_sign_positive()
    }

    fn is_sign_negative(self) -> bool {
        self.re.is_sign_negative()
    }

    fn mul_add(self, a: Self, b: Self) -> Self {
        Dual::new(
            self.re.mul_add(a.re, b.re),
            self.d * a.re + self.re * a.d + b.d,
        )
    }

    fn recip(self) -> Self {
        let v = self.re.recip();
        Dual::new(v, -self.d * v * v)
    }

    fn powi(self, n: i32) -> Self {
        let v = self.re.powi(n);
        let dv = S::from_i32(n).expect("powi exponent") * self.re.powi(n - 1);
        Dual::new(v, self.d * dv)
    }

    fn powf(self, p: Self) -> Self {
        let v = self.re.powf(p.re);
        if p.d.is_zero() {
            // Plain power rule; valid wherever the primal powf is.
            let dv = p.re * self.re.powf(p.re - S::one());
            Dual::new(v, self.d * dv)
        } else {
            // d(x^p) = x^p * (dp ln x + p dx / x), needs x > 0.
            let dv = v * (p.d * self.re.ln() + p.re * self.d / self.re);
            Dual::new(v, dv)
        }
    }

    fn sqrt(self) -> Self {
        let v = self.re.sqrt();
        Dual::new(v, self.d / (v + v))
    }

    fn exp(self) -> Self {
        let v = self.re.exp();
        Dual::new(v, self.d * v)
    }

    fn exp2(self) -> Self {
        let v = self.re.exp2();
        Dual::new(v, self.d * v * S::of(std::f64::consts::LN_2))
    }

    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.d / self.re)
    }

    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }

    fn log2(self) -> Self {
        Dual::new(self.re.log2(), self.d / (self.re * S::of(std::f64::consts::LN_2)))
    }

    fn log10(self) -> Self {
        Dual::new(
            self.re.log10(),
            self.d / (self.re * S::of(std::f64::consts::LN_10)),
        )
    }

    fn max(self, other: Self) -> Self {
        if self.re >= other.re {
            self
        } else {
            other
        }
    }

    fn min(self, other: Self) -> Self {
        if self.re <= other.re {
            self
        } else {
            other
        }
    }

    fn abs_sub(self, other: Self) -> Self {
        (self - other).max(Self::zero())
    }

    fn cbrt(self) -> Self {
        let v = self.re.cbrt();
        Dual::new(v, self.d / (S::of(3.0) * v * v))
    }

    fn hypot(self, other: Self) -> Self {
        let v = self.re.hypot(other.re);
        Dual::new(v, (self.re * self.d + other.re * other.d) / v)
    }

    fn sin(self) -> Self {
        Dual::new(self.re.sin(), self.d * self.re.cos())
    }

    fn cos(self) -> Self {
        Dual::new(self.re.cos(), -self.d * self.re.sin())
    }

    fn tan(self) -> Self {
        let c = self.re.cos();
        Dual::new(self.re.tan(), self.d / (c * c))
    }

    fn asin(self) -> Self {
        Dual::new(
            self.re.asin(),
            self.d / (S::one() - self.re * self.re).sqrt(),
        )
    }

    fn acos(self) -> Self {
        Dual::new(
            self.re.acos(),
            -self.d / (S::one() - self.re * self.re).sqrt(),
        )
    }

    fn atan(self) -> Self {
        Dual::new(self.re.atan(), self.d / (S::one() + self.re * self.re))
    }

    fn atan2(self, other: Self) -> Self {
        let denom = self.re * self.re + other.re * other.re;
        Dual::new(
            self.re.atan2(other.re),
            (other.re * self.d - self.re * other.d) / denom,
        )
    }

    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }

    fn exp_m1(self) -> Self {
        Dual::new(self.re.exp_m1(), self.d * self.re.exp())
    }

    fn ln_1p(self) -> Self {
        Dual::new(self.re.ln_1p(), self.d / (S::one() + self.re))
    }

    fn sinh(self) -> Self {
        Dual::new(self.re.sinh(), self.d * self.re.cosh())
    }

    fn cosh(self) -> Self {
        Dual::new(self.re.cosh(), self.d * self.re.sinh())
    }

    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.d * (S::one() - t * t))
    }

    fn asinh(self) -> Self {
        Dual::new(
            self.re.asinh(),
            self.d / (self.re * self.re + S::one()).sqrt(),
        )
    }

    fn acosh(self) -> Self {
        Dual::new(
            self.re.acosh(),
            self.d / (self.re * self.re - S::one()).sqrt(),
        )
    }

    fn atanh(self) -> Self {
        Dual::new(self.re.atanh(), self.d / (S::one() - self.re * self.re))
    }

    fn integer_decode(self) -> (u64, i16, i8) {
        self.re.integer_decode()
    }
}

impl<S: Scalar> Scalar for Dual<S> {
    fn of(value: f64) -> Self {
        Dual::constant(S::of(value))
    }

    fn as_f64(self) -> f64 {
        self.re.as_f64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn derivative_at(f: impl Fn(Dual64) -> Dual64, x: f64) -> f64 {
        f(Dual::seeded(x, 1.0)).d
    }

    fn numeric_derivative(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    type DerivativeCase = (fn(Dual64) -> Dual64, fn(f64) -> f64, f64);

    #[test]
    fn elementary_rules_match_finite_differences() {
        let cases: Vec<DerivativeCase> = vec![
            (|x| x.exp(), |x| x.exp(), 0.7),
            (|x| x.ln(), |x| x.ln(), 1.3),
            (|x| x.sqrt(), |x| x.sqrt(), 2.2),
            (|x| x.tanh(), |x| x.tanh(), -0.4),
            (|x| x.recip(), |x| x.recip(), 1.7),
            (|x| x.powi(3), |x| x.powi(3), -1.2),
            (
                |x| x * x + Dual::constant(2.0) * x,
                |x| x * x + 2.0 * x,
                0.9,
            ),
            (
                |x| (x * x.exp()) / (Dual::constant(1.0) + x * x),
                |x| (x * x.exp()) / (1.0 + x * x),
                0.55,
            ),
        ];
        for (fd, ff, x) in cases {
            let exact = derivative_at(fd, x);
            let approx = numeric_derivative(ff, x);
            assert!(
                (exact - approx).abs() < 1e-6,
                "derivative mismatch at {x}: {exact} vs {approx}"
            );
        }
    }

    #[test]
    fn max_picks_branch_by_value() {
        let a = Dual64::seeded(2.0, 1.0);
        let b = Dual64::seeded(1.0, 5.0);
        let m = a.max(b);
        assert_eq!(m.re, 2.0);
        assert_eq!(m.d, 1.0);
        let m = b.max(a);
        assert_eq!(m.d, 1.0);
    }

    #[test]
    fn powf_with_constant_exponent_handles_negative_base() {
        let x = Dual64::seeded(-2.0, 1.0);
        let y = x.powf(Dual::constant(2.0));
        assert_eq!(y.re, 4.0);
        assert!((y.d - (-4.0)).abs() < 1e-12);
    }

    #[test]
    fn comparisons_ignore_tangents() {
        let a = Dual64::seeded(1.0, 9.0);
        let b = Dual64::seeded(1.0, -3.0);
        assert_eq!(a, b);
        assert!(Dual64::seeded(0.5, 100.0) < a);
    }

    #[test]
    fn second_derivative_via_nested_duals() {
        // f(x) = x^3, f''(2) = 12, computed as d/dx of the dual derivative.
        type D2 = Dual<Dual64>;
        let x = D2::seeded(Dual64::seeded(2.0, 1.0), Dual64::constant(1.0));
        let y = x * x * x;
        assert!((y.d.d - 12.0).abs() < 1e-12);
    }
}
