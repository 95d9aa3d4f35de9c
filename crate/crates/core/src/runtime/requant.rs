//! Requantization of wide accumulators back to activation codes.

use std::fmt;
use std::str::FromStr;

use num_integer::Integer;

use crate::error::{Error, Result};

/// Largest multiplier, exclusive.
pub const MULTIPLIER_LIMIT: u32 = 1 << 31;
pub const MAX_SHIFT: u8 = 62;
/// Multiplier relative error budget is `2^-ERROR_BITS`.
pub const ERROR_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequantMode {
    /// `round(acc * numerator / denominator)` by integer division.
    ExactRational,
    /// `round(acc * multiplier / 2^shift)` by a rounding right shift.
    MultiplyShift,
}

impl fmt::Display for RequantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RequantMode::ExactRational => "exact_rational",
            RequantMode::MultiplyShift => "multiply_shift",
        })
    }
}

impl FromStr for RequantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_rational" => Ok(RequantMode::ExactRational),
            "multiply_shift" => Ok(RequantMode::MultiplyShift),
            other => Err(Error::Config(format!("unknown requantization mode {other:?}"))),
        }
    }
}

/// A layer's composite scale as an exact fraction and as a fixed-point
/// multiplier with a right shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequantParams {
    numerator: i64,
    denominator: i64,
    multiplier: u32,
    shift: u8,
}

impl RequantParams {
    /// Scale `numerator / denominator` in lowest terms with its multiplier.
    pub fn new(numerator: i64, denominator: i64) -> Result<Self> {
        let mut p = Self::fraction(numerator, denominator)?;
        (p.multiplier, p.shift) = fixed_point(p.numerator, p.denominator)?;
        Ok(p)
    }

    /// Scale in lowest terms without a fixed-point form (multiplier 0).
    /// Such a scale always rescales exactly.
    pub fn fraction(numerator: i64, denominator: i64) -> Result<Self> {
        if numerator < 1 || denominator < 1 {
            return Err(Error::Config(format!("requantization scale {numerator}/{denominator} must be positive")));
        }
        let g = numerator.gcd(&denominator);
        Ok(Self { numerator: numerator / g, denominator: denominator / g, multiplier: 0, shift: 0 })
    }

    pub fn has_fixed_point(&self) -> bool {
        self.multiplier != 0
    }

    /// Rebuild from stored fields, rejecting anything [`RequantParams::new`]
    /// or [`RequantParams::fraction`] would not produce.
    pub fn from_parts(numerator: i64, denominator: i64, multiplier: u32, shift: u8) -> Result<Self> {
        let p = if multiplier == 0 {
            Self::fraction(numerator, denominator)?
        } else {
            Self::new(numerator, denominator)?
        };
        if p != (Self { numerator, denominator, multiplier, shift }) {
            return Err(Error::Config(format!(
                "requantization fields {numerator}/{denominator}, {multiplier}>>{shift} are not canonical"
            )));
        }
        Ok(p)
    }

    pub fn numerator(&self) -> i64 {
        self.numerator
    }

    pub fn denominator(&self) -> i64 {
        self.denominator
    }

    pub fn multiplier(&self) -> u32 {
        self.multiplier
    }

    pub fn shift(&self) -> u8 {
        self.shift
    }

    /// Rounded rescale of an accumulator, saturated to the `i64` range.
    pub fn rescale(&self, acc: i64, mode: RequantMode) -> i64 {
        let v = match mode {
            RequantMode::MultiplyShift if self.has_fixed_point() => {
                shift_round(acc as i128 * self.multiplier as i128, self.shift)
            }
            _ => div_round(acc as i128 * self.numerator as i128, self.denominator as i128),
        };
        v.clamp(i64::MIN as i128, i64::MAX as i128) as i64
    }
}

/// `round(x / d)` for `d > 0`, ties away from zero.
pub fn div_round(x: i128, d: i128) -> i128 {
    let q = (2 * x.abs() + d) / (2 * d);
    if x < 0 {
        -q
    } else {
        q
    }
}

/// `round(x / 2^s)`, ties away from zero.
pub fn shift_round(x: i128, s: u8) -> i128 {
    if s == 0 {
        return x;
    }
    let q = (x.abs() + (1i128 << (s - 1))) >> s;
    if x < 0 {
        -q
    } else {
        q
    }
}

/// Multiplier below `2^31` and the largest shift up to 62 such that
/// `multiplier / 2^shift` rounds `numerator / denominator`.
pub fn fixed_point(numerator: i64, denominator: i64) -> Result<(u32, u8)> {
    let (n, d) = (numerator as u128, denominator as u128);
    let at = |s: u8| (2 * (n << s) + d) / (2 * d);
    let mut best = None;
    for s in 0..=MAX_SHIFT {
        let m = at(s);
        if m >= MULTIPLIER_LIMIT as u128 {
            break;
        }
        best = Some((m as u32, s));
    }
    let (m, s) = best.ok_or_else(|| Error::Config(format!("scale {numerator}/{denominator} needs a multiplier of 2^31 or more")))?;
    let exact = n << s;
    let err = (m as u128 * d).abs_diff(exact);
    if m == 0 || err << ERROR_BITS > exact {
        return Err(Error::Config(format!(
            "scale {numerator}/{denominator} not representable within 2^-{ERROR_BITS} by a 31-bit multiplier"
        )));
    }
    Ok((m, s))
}

/// Rescale, then saturate to `[0, out_max]`.
pub fn requantize(acc: i64, p: &RequantParams, mode: RequantMode, out_max: i64) -> i64 {
    p.rescale(acc, mode).clamp(0, out_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use proptest::prelude::*;

    fn big_round(x: BigInt, d: BigInt) -> BigInt {
        let two = BigInt::from(2);
        let (q, r) = x.div_mod_floor(&d);
        // floor division; bump when the remainder is at least half, or
        // exactly half for a non-negative quotient
        let twice = &r * &two;
        if twice > d || (twice == d && q >= BigInt::from(0)) {
            q + 1
        } else {
            q
        }
    }

    #[test]
    fn unit_scale_is_identity() {
        let p = RequantParams::new(1, 1).unwrap();
        assert_eq!((p.multiplier(), p.shift()), (1 << 30, 30));
        for k in [0, 1, 7, 15, 255, -3] {
            assert_eq!(p.rescale(k, RequantMode::MultiplyShift), k);
            assert_eq!(p.rescale(k, RequantMode::ExactRational), k);
        }
    }

    #[test]
    fn zero_accumulator_maps_to_zero() {
        for (n, d) in [(1, 1), (15, 225), (7, 3825), (1234, 5)] {
            let p = RequantParams::new(n, d).unwrap();
            for mode in [RequantMode::ExactRational, RequantMode::MultiplyShift] {
                assert_eq!(requantize(0, &p, mode, 15), 0);
            }
        }
    }

    #[test]
    fn scale_is_reduced_and_rounds_half_away() {
        let p = RequantParams::new(30, 225).unwrap();
        assert_eq!((p.numerator(), p.denominator()), (2, 15));
        assert_eq!(div_round(5, 2), 3);
        assert_eq!(div_round(-5, 2), -3);
        assert_eq!(div_round(4, 3), 1);
        assert_eq!(shift_round(3, 1), 2);
        assert_eq!(shift_round(-3, 1), -2);
        assert_eq!(shift_round(5, 2), 1);
    }

    #[test]
    fn clamp_saturates() {
        let p = RequantParams::new(1, 1).unwrap();
        assert_eq!(requantize(-4, &p, RequantMode::ExactRational, 15), 0);
        assert_eq!(requantize(99, &p, RequantMode::MultiplyShift, 15), 15);
    }

    #[test]
    fn non_canonical_fields_are_rejected() {
        let p = RequantParams::new(2, 15).unwrap();
        assert!(RequantParams::from_parts(2, 15, p.multiplier(), p.shift()).is_ok());
        assert!(RequantParams::from_parts(4, 30, p.multiplier(), p.shift()).is_err());
        assert!(RequantParams::from_parts(2, 15, p.multiplier() + 1, p.shift()).is_err());
    }

    proptest! {
        #[test]
        fn shift_matches_big_integer_rounding(acc in any::<i64>(), m in 0u32..(1 << 31), s in 0u8..=62) {
            let x = acc as i128 * m as i128;
            let expect = big_round(BigInt::from(acc) * BigInt::from(m), BigInt::from(1) << s as usize);
            prop_assert_eq!(BigInt::from(shift_round(x, s)), expect);
        }

        #[test]
        fn exact_mode_matches_big_integer_rounding(acc in any::<i64>(), n in 1i64..1 << 40, d in 1i64..1 << 40) {
            let p = RequantParams::fraction(n, d).unwrap();
            let expect = big_round(BigInt::from(acc) * BigInt::from(p.numerator()), BigInt::from(p.denominator()))
                .clamp(BigInt::from(i64::MIN), BigInt::from(i64::MAX));
            prop_assert_eq!(BigInt::from(p.rescale(acc, RequantMode::ExactRational)), expect);
        }

        #[test]
        fn multiplier_error_is_within_budget(n in 1i64..1 << 20, d in 1i64..1 << 40) {
            if let Ok(p) = RequantParams::new(n, d) {
                let exact = BigInt::from(p.numerator()) << p.shift() as usize;
                let approx = BigInt::from(p.multiplier()) * BigInt::from(p.denominator());
                let err = if approx > exact { &approx - &exact } else { &exact - &approx };
                prop_assert!(err << ERROR_BITS as usize <= exact);
                prop_assert!(p.multiplier() < MULTIPLIER_LIMIT);
            }
        }

        #[test]
        fn requantize_is_monotone(a in -1_000_000i64..1_000_000, b in -1_000_000i64..1_000_000, n in 1i64..5000, d in 1i64..5000) {
            let p = RequantParams::new(n, d).unwrap();
            let (lo, hi) = (a.min(b), a.max(b));
            for mode in [RequantMode::ExactRational, RequantMode::MultiplyShift] {
                prop_assert!(p.rescale(lo, mode) <= p.rescale(hi, mode));
            }
        }
    }
}
