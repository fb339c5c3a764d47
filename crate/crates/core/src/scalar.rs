//! Scalar abstractions shared by the evaluator and the numerical core.
//!
//! [`Scalar`] is the minimal surface the expression evaluator needs. It is
//! implemented for `f32`, `f64` and for [`Dual`] over any scalar, so nested
//! duals give exact second derivatives. [`Real`] is the bound used by the
//! linear-algebra side and is only implemented for the primitive floats.

use std::fmt::{Debug, Display};
use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::RealField;

/// Elementary unary functions understood by the evaluator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Elementary {
    Sin,
    Cos,
    Tan,
    Atan,
    Exp,
    Ln,
    Sqrt,
}

pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(value: f64) -> Self;

    /// The underlying real value with all infinitesimal parts dropped.
    fn primal(&self) -> f64;

    /// True when every component (value and all tangents) is finite.
    fn all_finite(&self) -> bool;

    /// True when every tangent component is exactly zero.
    fn is_constant(&self) -> bool;

    fn apply(self, f: Elementary) -> Self;

    /// `atan2(self, x)` with `self` as the ordinate.
    fn atan2_with(self, x: Self) -> Self;

    fn pow_real(self, exponent: Self) -> Self;

    fn pow_int(self, exponent: i32) -> Self;
}

macro_rules! impl_scalar_float {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn constant(value: f64) -> Self {
                value as $t
            }
            #[inline]
            fn primal(&self) -> f64 {
                *self as f64
            }
            #[inline]
            fn all_finite(&self) -> bool {
                self.is_finite()
            }
            #[inline]
            fn is_constant(&self) -> bool {
                true
            }
            #[inline]
            fn apply(self, f: Elementary) -> Self {
                match f {
                    Elementary::Sin => self.sin(),
                    Elementary::Cos => self.cos(),
                    Elementary::Tan => self.tan(),
                    Elementary::Atan => self.atan(),
                    Elementary::Exp => self.exp(),
                    Elementary::Ln => self.ln(),
                    Elementary::Sqrt => self.sqrt(),
                }
            }
            #[inline]
            fn atan2_with(self, x: Self) -> Self {
                self.atan2(x)
            }
            #[inline]
            fn pow_real(self, exponent: Self) -> Self {
                self.powf(exponent)
            }
            #[inline]
            fn pow_int(self, exponent: i32) -> Self {
                self.powi(exponent)
            }
        }
    };
}

impl_scalar_float!(f32);
impl_scalar_float!(f64);

/// Floating-point types the numerical core is generic over.
pub trait Real: Scalar + RealField + Copy + Display + Send + Sync {
    /// Machine epsilon of the type.
    fn eps() -> Self;
}

impl Real for f32 {
    fn eps() -> Self {
        f32::EPSILON
    }
}

impl Real for f64 {
    fn eps() -> Self {
        f64::EPSILON
    }
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Scalar>(value: f64) -> T {
    T::constant(value)
}

/// Truncated first-order Taylor number `re + eps·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<S> {
    pub re: S,
    pub eps: S,
}

impl<S: Scalar> Dual<S> {
    pub fn new(re: S, eps: S) -> Self {
        Self { re, eps }
    }

    pub fn constant_of(re: S) -> Self {
        Self {
            re,
            eps: S::constant(0.0),
        }
    }

    pub fn variable(re: S) -> Self {
        Self {
            re,
            eps: S::constant(1.0),
        }
    }
}

impl<S: Scalar> Add for Dual<S> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Self::new(self.re + rhs.re, self.eps + rhs.eps)
    }
}

impl<S: Scalar> Sub for Dual<S> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.re - rhs.re, self.eps - rhs.eps)
    }
}

impl<S: Scalar> Mul for Dual<S> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        Self::new(self.re * rhs.re, self.eps * rhs.re + self.re * rhs.eps)
    }
}

impl<S: Scalar> Div for Dual<S> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let q = self.re / rhs.re;
        Self::new(q, (self.eps - q * rhs.eps) / rhs.re)
    }
}

impl<S: Scalar> Neg for Dual<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.re, -self.eps)
    }
}

impl<S: Scalar> Scalar for Dual<S> {
    fn constant(value: f64) -> Self {
        Self::constant_of(S::constant(value))
    }

    fn primal(&self) -> f64 {
        self.re.primal()
    }

    fn all_finite(&self) -> bool {
        self.re.all_finite() && self.eps.all_finite()
    }

    fn is_constant(&self) -> bool {
        self.re.is_constant() && self.eps.is_constant() && self.eps.primal() == 0.0
    }

    fn apply(self, f: Elementary) -> Self {
        let one = S::constant(1.0);
        let (value, slope) = match f {
            Elementary::Sin => (self.re.apply(f), self.re.apply(Elementary::Cos)),
            Elementary::Cos => (self.re.apply(f), -self.re.apply(Elementary::Sin)),
            Elementary::Tan => {
                let t = self.re.apply(f);
                (t, one + t * t)
            }
            Elementary::Atan => (self.re.apply(f), one / (one + self.re * self.re)),
            Elementary::Exp => {
                let e = self.re.apply(f);
                (e, e)
            }
            Elementary::Ln => (self.re.apply(f), one / self.re),
            Elementary::Sqrt => {
                let s = self.re.apply(f);
                (s, one / (S::constant(2.0) * s))
            }
        };
        Self::new(value, slope * self.eps)
    }

    fn atan2_with(self, x: Self) -> Self {
        let y = self;
        let r2 = x.re * x.re + y.re * y.re;
        Self::new(
            y.re.atan2_with(x.re),
            (x.re * y.eps - y.re * x.eps) / r2,
        )
    }

    fn pow_real(self, exponent: Self) -> Self {
        let value = self.re.pow_real(exponent.re);
        let base_term = exponent.re
            * self.re.pow_real(exponent.re - S::constant(1.0))
            * self.eps;
        // d/db a^b = a^b ln a; skipped when b carries no tangent so that
        // negative bases with constant exponents stay finite.
        if exponent.eps.is_constant() && exponent.eps.primal() == 0.0 {
            Self::new(value, base_term)
        } else {
            Self::new(
                value,
                base_term + value * self.re.apply(Elementary::Ln) * exponent.eps,
            )
        }
    }

    fn pow_int(self, exponent: i32) -> Self {
        let value = self.re.pow_int(exponent);
        let slope = if exponent == 0 {
            S::constant(0.0)
        } else {
            S::constant(exponent as f64) * self.re.pow_int(exponent - 1)
        };
        Self::new(value, slope * self.eps)
    }
}
