//! Integer-only runtime: export, file format, inference and tracing.

mod infer;
mod model;
mod requant;

use std::fmt::Write as _;

use crate::data::{Dataset, PIXEL_BITS};
use crate::error::{Error, Result};
use crate::eval::Classifier;
use crate::quant::quantize_code;
use crate::scalar::Scalar;
use crate::tensor::{CodeKind, IntTensor, Tensor};

pub use infer::{infer, infer_trace, mode_deviation};
pub use model::{
    export, layer_scale, IntegerModel, LinearRecord, Record, KIND_INTEGER_MODEL, KIND_STUDENT, KIND_TEACHER, MAGIC,
    VERSION,
};
pub(crate) use model::{read_header, write_header};
pub use requant::{div_round, fixed_point, requantize, shift_round, RequantMode, RequantParams, ERROR_BITS, MAX_SHIFT};

/// Quantize real inputs in `[0, 1]` to `bits`-bit codes. This is the only
/// real-to-integer conversion on the inference path.
pub fn quantize_input<T: Scalar>(x: &Tensor<T>, bits: u8) -> Result<IntTensor<u8>> {
    let codes = x.data().iter().map(|&r| quantize_code(r, bits).map(|c| c as u8)).collect::<Result<Vec<_>>>()?;
    IntTensor::new(x.shape().to_vec(), codes, bits, CodeKind::Unsigned)
}

/// An integer model bound to a requantization mode, evaluated on datasets.
#[derive(Debug, Clone, Copy)]
pub struct IntegerRunner<'a> {
    pub model: &'a IntegerModel,
    pub mode: RequantMode,
}

impl<'a> IntegerRunner<'a> {
    pub fn new(model: &'a IntegerModel, mode: RequantMode) -> Result<Self> {
        if model.input_bits() != PIXEL_BITS {
            return Err(Error::Config(format!(
                "model takes {}-bit inputs but datasets hold {PIXEL_BITS}-bit pixels",
                model.input_bits()
            )));
        }
        Ok(Self { model, mode })
    }

    pub fn scores(&self, data: &Dataset, rows: &[usize]) -> Result<IntTensor<i64>> {
        infer(self.model, &data.codes(rows, self.model.input_shape())?, self.mode)
    }

    pub fn trace(&self, data: &Dataset, rows: &[usize]) -> Result<(IntTensor<i64>, Vec<IntTensor<i64>>)> {
        infer_trace(self.model, &data.codes(rows, self.model.input_shape())?, self.mode)
    }

    /// Predicted class per row: the argmax of the integer scores.
    pub fn predict(&self, data: &Dataset, rows: &[usize]) -> Result<Vec<usize>> {
        let s = self.scores(data, rows)?;
        Ok(s.data().chunks(self.model.classes()).map(crate::eval::argmax).collect())
    }
}

impl Classifier for IntegerRunner<'_> {
    fn logits(&self, data: &Dataset, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        let s = self.scores(data, rows)?;
        let (_, den) = *self.model.dequant_scales().last().expect("model has layers");
        Ok(s.data().chunks(self.model.classes()).map(|r| r.iter().map(|&v| v as f64 / den as f64).collect()).collect())
    }
}

/// Trace lines `SAMPLE LAYER SHAPE VALUES...`, the shape written as
/// `AxBxC` and the values as space-separated integers.
pub fn format_trace(first_sample: usize, layers: &[IntTensor<i64>]) -> String {
    let mut out = String::new();
    let n = layers.first().map_or(0, |t| t.shape()[0]);
    for i in 0..n {
        for (l, t) in layers.iter().enumerate() {
            let shape = t.shape()[1..].iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            let per = t.len() / n;
            let _ = write!(out, "{} {l} {shape}", first_sample + i);
            for v in &t.data()[i * per..(i + 1) * per] {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
    }
    out
}

/// One parsed trace line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLine {
    pub sample: usize,
    pub layer: usize,
    pub shape: Vec<usize>,
    pub values: Vec<i64>,
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(no, line)| {
            let bad = || Error::Data(format!("trace line {}: malformed", no + 1));
            let mut it = line.split_whitespace();
            let sample = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let layer = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let shape = it
                .next()
                .ok_or_else(bad)?
                .split('x')
                .map(|d| d.parse().map_err(|_| bad()))
                .collect::<Result<Vec<usize>>>()?;
            let values = it.map(|v| v.parse().map_err(|_| bad())).collect::<Result<Vec<i64>>>()?;
            if values.len() != shape.iter().product::<usize>() {
                return Err(bad());
            }
            Ok(TraceLine { sample, layer, shape, values })
        })
        .collect()
}

#[cfg(test)]
mod tests;
