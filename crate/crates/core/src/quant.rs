//! Uniform low-bit quantizers and their straight-through backward rule.
//!
//! A value `r` in `[0, 1]` maps to the `m`-bit code `round((2^m - 1) r)`.
//! Activation codes dequantize to `code / (2^m - 1)`, weight codes to
//! `2 code / (2^m - 1) - 1`. Rounding is nearest-integer with ties away from
//! zero everywhere in the crate.
//!
//! Raw weights are hard-clamped to `[-1, 1]` before quantization; there is no
//! tanh normalization step.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{code_max, CodeKind, IntTensor, Tensor};

pub const MAX_BITS: u8 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantConfig {
    pub weight_bits: u8,
    pub activation_bits: u8,
    /// Block index → (weight bits, activation bits).
    pub overrides: BTreeMap<usize, (u8, u8)>,
}

fn check_bits(bits: u8) -> Result<()> {
    if (1..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!("bit-width {bits} outside [1, {MAX_BITS}]")))
    }
}

impl QuantConfig {
    pub fn new(weight_bits: u8, activation_bits: u8) -> Result<Self> {
        check_bits(weight_bits)?;
        check_bits(activation_bits)?;
        Ok(Self { weight_bits, activation_bits, overrides: BTreeMap::new() })
    }

    pub fn with_override(mut self, block: usize, weight_bits: u8, activation_bits: u8) -> Result<Self> {
        check_bits(weight_bits)?;
        check_bits(activation_bits)?;
        self.overrides.insert(block, (weight_bits, activation_bits));
        Ok(self)
    }

    /// (weight bits, activation bits) for a block.
    pub fn bits_for(&self, block: usize) -> (u8, u8) {
        self.overrides.get(&block).copied().unwrap_or((self.weight_bits, self.activation_bits))
    }
}

/// Fixed positive integer scale that replaces normalization in the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScaleFactor(u32);

impl ScaleFactor {
    pub const ONE: ScaleFactor = ScaleFactor(1);

    pub fn new(alpha: i64) -> Result<Self> {
        if alpha < 1 || alpha > u32::MAX as i64 {
            return Err(Error::Config(format!("scale factor {alpha} must be a positive 32-bit integer")));
        }
        Ok(Self(alpha as u32))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

#[inline]
fn levels<T: Scalar>(bits: u8) -> T {
    T::from_i64(code_max(bits))
}

/// `round((2^m - 1) r)` for `r` in `[0, 1]`.
pub fn quantize_code<T: Scalar>(r: T, bits: u8) -> Result<i64> {
    check_bits(bits)?;
    if !(r >= T::zero() && r <= T::one()) {
        return Err(Error::Range(format!("quantizer input {r:?} outside [0, 1]")));
    }
    let code = (levels::<T>(bits) * r).round_half_away();
    Ok(code.to_integer().expect("rounded value is integral"))
}

fn check_code(code: i64, bits: u8) -> Result<()> {
    check_bits(bits)?;
    if (0..=code_max(bits)).contains(&code) {
        Ok(())
    } else {
        Err(Error::Range(format!("code {code} outside {bits}-bit range")))
    }
}

/// Activation dequantization: `code / (2^m - 1)`.
pub fn rescale_activation<T: Scalar>(code: i64, bits: u8) -> Result<T> {
    check_code(code, bits)?;
    Ok(T::from_ratio(code, code_max(bits)))
}

/// Weight dequantization: `2 code / (2^m - 1) - 1`.
pub fn rescale_weight<T: Scalar>(code: i64, bits: u8) -> Result<T> {
    check_code(code, bits)?;
    Ok(T::from_ratio(2 * code - code_max(bits), code_max(bits)))
}

/// Scaled activation dequantization `alpha * code / (2^m - 1)`.
pub fn scaled_rescale<T: Scalar>(code: i64, bits: u8, alpha: ScaleFactor) -> Result<T> {
    Ok(T::from_i64(alpha.get() as i64) * rescale_activation::<T>(code, bits)?)
}

/// Clamp raw weights to `[-1, 1]` and quantize them onto the `m`-bit grid.
/// Returns the unsigned codes and the dequantized weights.
pub fn quantize_weight_tensor<T: Scalar>(w: &Tensor<T>, bits: u8) -> Result<(IntTensor<u8>, Tensor<T>)> {
    check_bits(bits)?;
    let two = T::one() + T::one();
    let max = code_max(bits);
    let mut codes = Vec::with_capacity(w.len());
    let mut deq = Vec::with_capacity(w.len());
    for &v in w.data() {
        let unit = (v.clamp_to(-T::one(), T::one()) + T::one()) / two;
        let c = quantize_code(unit, bits)?;
        codes.push(c as u8);
        deq.push(T::from_ratio(2 * c - max, max));
    }
    Ok((
        IntTensor::new(w.shape().to_vec(), codes, bits, CodeKind::Unsigned)?,
        Tensor::new(w.shape().to_vec(), deq)?,
    ))
}

/// Unsigned weight codes to centered integers `2c - (2^m - 1)`, so that the
/// dequantized weight is exactly `centered / (2^m - 1)`.
pub fn center_weight_codes(codes: &IntTensor<u8>) -> Result<IntTensor<i16>> {
    let max = code_max(codes.bits()) as i16;
    let data = codes.data().iter().map(|&c| 2 * c as i16 - max).collect();
    IntTensor::new(codes.shape().to_vec(), data, codes.bits(), CodeKind::Centered)
}

/// Dequantized weight tensor from centered codes.
pub fn dequantize_centered<T: Scalar>(codes: &IntTensor<i16>) -> Tensor<T> {
    let max = code_max(codes.bits());
    let data = codes.data().iter().map(|&q| T::from_ratio(q as i64, max)).collect();
    Tensor::new(codes.shape().to_vec(), data).expect("shape already validated")
}

/// Quantize-dequantize an activation tensor that already lies in `[0, 1]`.
pub fn fake_quantize_activation<T: Scalar>(x: &Tensor<T>, bits: u8) -> Result<Tensor<T>> {
    check_bits(bits)?;
    let max = code_max(bits);
    let lv = levels::<T>(bits);
    let mut out = Vec::with_capacity(x.len());
    for &v in x.data() {
        if !(v >= T::zero() && v <= T::one()) {
            return Err(Error::Range(format!("activation {v:?} outside [0, 1]")));
        }
        let c = (lv * v).round_half_away().to_integer().expect("integral");
        out.push(T::from_ratio(c, max));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Activation codes of a tensor in `[0, 1]`.
pub fn activation_codes<T: Scalar>(x: &Tensor<T>, bits: u8) -> Result<Vec<i64>> {
    x.data().iter().map(|&v| quantize_code(v, bits)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantDomain {
    /// `[-1, 1]`
    Weight,
    /// `[0, 1]`
    Activation,
}

/// Straight-through estimator: the upstream gradient passes where the
/// quantizer input lies strictly inside its domain and is zero elsewhere.
pub fn ste_backward<T: Scalar>(upstream: &Tensor<T>, pre_quant: &Tensor<T>, domain: QuantDomain) -> Result<Tensor<T>> {
    let (lo, hi) = match domain {
        QuantDomain::Weight => (-T::one(), T::one()),
        QuantDomain::Activation => (T::zero(), T::one()),
    };
    upstream.zip_map(pre_quant, |g, x| if x > lo && x < hi { g } else { T::zero() })
}
