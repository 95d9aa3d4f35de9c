//! Scalar abstraction shared by every real-valued path.
//!
//! The reference forward passes, the quantizers and the distiller are all
//! written against [`Scalar`], so the same code runs in `f32`, `f64`, or in
//! exact rational arithmetic ([`Exact`]). Gradient-based teacher training
//! additionally needs transcendental functions and is bounded on [`Real`].

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, Neg, SubAssign};

use num_integer::Roots;
use num_rational::Ratio;
use num_traits::{Float, Num, Signed, ToPrimitive};

/// Exact rational scalar used as the correctness oracle.
pub type Exact = Ratio<i64>;

pub trait Scalar:
    Num
    + Copy
    + PartialOrd
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `numer / denom`, exactly where the type allows it.
    fn from_ratio(numer: i64, denom: i64) -> Self;

    fn from_f64(value: f64) -> Self;

    fn to_f64(self) -> f64;

    /// Nearest integer, ties away from zero.
    fn round_half_away(self) -> Self;

    fn floor(self) -> Self;

    fn ceil(self) -> Self;

    fn sqrt(self) -> Self;

    fn is_finite(self) -> bool;

    fn from_i64(value: i64) -> Self {
        Self::from_ratio(value, 1)
    }

    /// Integer value of an integral scalar; `None` if not integral or out of range.
    fn to_integer(self) -> Option<i64>;

    fn abs(self) -> Self {
        if self < Self::zero() {
            -self
        } else {
            self
        }
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    fn clamp_to(self, lo: Self, hi: Self) -> Self {
        self.max_of(lo).min_of(hi)
    }
}

/// Floating-point scalar usable for gradient training.
pub trait Real: Scalar + Float {}

impl Real for f32 {}
impl Real for f64 {}

macro_rules! float_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn from_ratio(numer: i64, denom: i64) -> Self {
                numer as $t / denom as $t
            }
            fn from_f64(value: f64) -> Self {
                value as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn round_half_away(self) -> Self {
                <$t>::round(self)
            }
            fn floor(self) -> Self {
                <$t>::floor(self)
            }
            fn ceil(self) -> Self {
                <$t>::ceil(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn from_i64(value: i64) -> Self {
                value as $t
            }
            fn to_integer(self) -> Option<i64> {
                if self.fract() == 0.0 {
                    self.to_i64()
                } else {
                    None
                }
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
        }
    };
}

float_scalar!(f32);
float_scalar!(f64);

impl Scalar for Exact {
    fn from_ratio(numer: i64, denom: i64) -> Self {
        Ratio::new(numer, denom)
    }
    fn from_f64(value: f64) -> Self {
        Ratio::approximate_float(value).expect("value not representable as Ratio<i64>")
    }
    fn to_f64(self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
    fn round_half_away(self) -> Self {
        // num-rational rounds half away from zero
        self.round()
    }
    fn floor(self) -> Self {
        Ratio::floor(&self)
    }
    fn ceil(self) -> Self {
        Ratio::ceil(&self)
    }
    /// Exact for perfect-square numerator and denominator, otherwise the
    /// nearest `Ratio` approximation of the float root.
    fn sqrt(self) -> Self {
        let (n, d) = (*self.numer(), *self.denom());
        if n >= 0 {
            let (rn, rd) = (n.sqrt(), d.sqrt());
            if rn * rn == n && rd * rd == d {
                return Ratio::new(rn, rd);
            }
        }
        Self::from_f64(self.to_f64().sqrt())
    }
    fn is_finite(self) -> bool {
        true
    }
    fn to_integer(self) -> Option<i64> {
        if self.is_integer() {
            Some(Ratio::to_integer(&self))
        } else {
            None
        }
    }
    fn abs(self) -> Self {
        Signed::abs(&self)
    }
}

/// Sum of squares, accumulated left to right.
pub fn sum_sq<T: Scalar>(values: &[T]) -> T {
    values.iter().fold(T::zero(), |acc, &v| acc + v * v)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_ties_go_away_from_zero() {
        assert_eq!(Scalar::round_half_away(2.5f64), 3.0);
        assert_eq!(Scalar::round_half_away(-2.5f64), -3.0);
        assert_eq!(Scalar::round_half_away(127.5f32), 128.0);
        assert_eq!(Exact::new(5, 2).round_half_away(), Exact::from_integer(3));
        assert_eq!(Exact::new(-5, 2).round_half_away(), Exact::from_integer(-3));
    }

    #[test]
    fn exact_sqrt_of_perfect_squares() {
        assert_eq!(Scalar::sqrt(Exact::new(9, 4)), Exact::new(3, 2));
        assert_eq!(Scalar::sqrt(Exact::from_integer(1)), Exact::from_integer(1));
    }

    #[test]
    fn integral_detection() {
        assert_eq!(3.0f64.to_integer(), Some(3));
        assert_eq!(3.5f64.to_integer(), None);
        assert_eq!(Exact::new(6, 3).to_integer(), Some(2));
        assert_eq!(Exact::new(1, 3).to_integer(), None);
    }
}
