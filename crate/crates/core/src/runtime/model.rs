//! The exported integer model and its binary file format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! header   "FIQN"  version:u16  endian:u8=1  kind:u8=0
//!          W:u8  A:u8  input_bits:u8  reserved:u8=0
//!          rank:u32  dims:u32*rank  classes:u32  records:u32
//! record   tag:u8  length:u32  payload
//! trailer  CRC-32 of every preceding byte
//! ```
//!
//! Record payloads:
//!
//! ```text
//! 1 conv     in:u32 out:u32 kernel:u32 stride:u32 padding:u32  LINEAR
//! 2 dense    fan_in:u32 units:u32                              LINEAR
//!   LINEAR = w_bits:u8 in_bits:u8 out_bits:u8 (0 = logits) alpha:u32
//!            numerator:i64 denominator:i64 multiplier:u32 shift:u8
//!            count:u32 weights:i16*count
//! 3 maxpool  size:u32
//! 4 flatten  (empty)
//! ```
//!
//! Weights are centered codes `q = 2c - (2^W - 1)`, so the real weight is
//! exactly `q / (2^W - 1)` and the grid offset needs no separate term. An
//! accumulator `acc = sum q * a` over input codes `a` then represents
//! `acc / ((2^W - 1)(2^in - 1))`; the student's scale and the output
//! quantizer turn that into the code `round(acc * alpha (2^out - 1) /
//! ((2^W - 1)(2^in - 1)))`, clamped to `[0, 2^out - 1]`. The stored
//! numerator/denominator is that fraction in lowest terms. The logits
//! layer stores `alpha / ((2^W - 1)(2^in - 1))` and emits `acc * numerator`
//! as its integer score; dividing by the denominator gives the real logit.
//! It needs no fixed-point multiplier and stores 0 there.
//! Both (2^k - 1) factors are odd, so exact rounding ties never occur.

use std::path::Path;

use crate::bytes::{check_crc, Reader, Writer};
use crate::error::{Error, Result};
use crate::network::{Activation, Linear, StudentNet};
use crate::quant::{center_weight_codes, ScaleFactor, MAX_BITS};
use crate::scalar::Scalar;
use crate::tensor::{code_max, conv_output_size, max_abs_bound, CodeKind, IntTensor};

use super::requant::RequantParams;

pub const MAGIC: &[u8; 4] = b"FIQN";
pub const VERSION: u16 = 1;
pub const LITTLE_ENDIAN: u8 = 1;

/// File kinds sharing the header.
pub const KIND_INTEGER_MODEL: u8 = 0;
pub const KIND_TEACHER: u8 = 1;
pub const KIND_STUDENT: u8 = 2;

pub(crate) const TAG_CONV: u8 = 1;
pub(crate) const TAG_DENSE: u8 = 2;
pub(crate) const TAG_MAXPOOL: u8 = 3;
pub(crate) const TAG_FLATTEN: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearRecord {
    pub geometry: Linear,
    pub weight_bits: u8,
    pub input_bits: u8,
    /// `None` for the logits layer.
    pub output_bits: Option<u8>,
    pub alpha: ScaleFactor,
    pub requant: RequantParams,
    /// Centered codes, OIHW or `[units, fan_in]`.
    pub weights: IntTensor<i16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Linear(LinearRecord),
    MaxPool { size: usize },
    Flatten,
}

/// Composite scale of a linear layer; see the module documentation.
pub fn layer_scale(
    alpha: ScaleFactor,
    weight_bits: u8,
    input_bits: u8,
    output_bits: Option<u8>,
) -> Result<RequantParams> {
    let den = code_max(weight_bits) * code_max(input_bits);
    match output_bits {
        Some(b) => RequantParams::new(alpha.get() as i64 * code_max(b), den),
        None => RequantParams::fraction(alpha.get() as i64, den),
    }
}

/// BN-free student in integer form: weight codes, integer scales and
/// requantization constants only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegerModel {
    weight_bits: u8,
    activation_bits: u8,
    input_bits: u8,
    input_shape: Vec<usize>,
    classes: usize,
    records: Vec<Record>,
}

fn check_bits(bits: u8, what: &str) -> Result<()> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::Config(format!("{what} bit-width {bits} outside 1..={MAX_BITS}")));
    }
    Ok(())
}

impl IntegerModel {
    /// Validate shapes, bit-widths, scales and accumulator headroom.
    pub fn new(
        weight_bits: u8,
        activation_bits: u8,
        input_bits: u8,
        input_shape: Vec<usize>,
        classes: usize,
        records: Vec<Record>,
    ) -> Result<Self> {
        let m = Self { weight_bits, activation_bits, input_bits, input_shape, classes, records };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        check_bits(self.weight_bits, "weight")?;
        check_bits(self.activation_bits, "activation")?;
        check_bits(self.input_bits, "input")?;
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        let mut bits = Some(self.input_bits);
        let mut layer = 0;
        let linear_count = self.records.iter().filter(|r| matches!(r, Record::Linear(_))).count();
        for record in &self.records {
            match record {
                Record::Linear(r) => {
                    let bad = |msg: String| Error::Config(format!("layer {layer}: {msg}"));
                    check_bits(r.weight_bits, "weight")?;
                    check_bits(r.input_bits, "input")?;
                    if bits != Some(r.input_bits) {
                        return Err(bad(format!("consumes {}-bit codes but receives {bits:?}", r.input_bits)));
                    }
                    let last = layer + 1 == linear_count;
                    match r.output_bits {
                        Some(b) => check_bits(b, "output")?,
                        None if last => {}
                        None => return Err(bad("only the last layer may emit logits".into())),
                    }
                    if r.weights.bits() != r.weight_bits || r.weights.kind() != CodeKind::Centered {
                        return Err(bad("weights are not centered codes of the declared width".into()));
                    }
                    if r.weights.shape() != r.geometry.weight_shape() {
                        return Err(bad(format!("weight shape {:?}", r.weights.shape())));
                    }
                    if r.requant != layer_scale(r.alpha, r.weight_bits, r.input_bits, r.output_bits)? {
                        return Err(bad("requantization does not match the layer's scale".into()));
                    }
                    shape = match (r.geometry, shape.as_slice()) {
                        (Linear::Conv { in_channels, out_channels, kernel, stride, padding }, &[c, h, w])
                            if c == in_channels && stride > 0 =>
                        {
                            let oh = conv_output_size(h, kernel, stride, padding);
                            let ow = conv_output_size(w, kernel, stride, padding);
                            let (Some(oh), Some(ow)) = (oh, ow) else {
                                return Err(bad(format!("kernel {kernel} does not fit {h}x{w}")));
                            };
                            vec![out_channels, oh, ow]
                        }
                        (Linear::Dense { fan_in, units }, &[f]) if f == fan_in => vec![units],
                        (g, s) => return Err(bad(format!("{g:?} cannot take input {s:?}"))),
                    };
                    let mut bound = max_abs_bound(
                        r.geometry.fan_in(),
                        code_max(r.weight_bits) as u128,
                        code_max(r.input_bits) as u128,
                    );
                    if r.output_bits.is_none() {
                        bound = bound.saturating_mul(r.requant.numerator() as u128);
                    }
                    if bound > i64::MAX as u128 {
                        return Err(Error::Overflow { layer: Some(layer) });
                    }
                    bits = r.output_bits;
                    layer += 1;
                }
                Record::MaxPool { size } => match shape.as_slice() {
                    &[c, h, w] if *size > 0 && *size <= h && *size <= w => shape = vec![c, h / size, w / size],
                    s => return Err(Error::Config(format!("pool {size} cannot take input {s:?}"))),
                },
                Record::Flatten => shape = vec![shape.iter().product()],
            }
        }
        if linear_count == 0 {
            return Err(Error::Config("model has no layers".into()));
        }
        if shape != [self.classes] {
            return Err(Error::Config(format!("model output {shape:?} does not match {} classes", self.classes)));
        }
        Ok(())
    }

    pub fn weight_bits(&self) -> u8 {
        self.weight_bits
    }

    pub fn activation_bits(&self) -> u8 {
        self.activation_bits
    }

    pub fn input_bits(&self) -> u8 {
        self.input_bits
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn linear_layers(&self) -> impl Iterator<Item = &LinearRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Linear(l) => Some(l),
            _ => None,
        })
    }

    /// Per linear layer, the `(numerator, denominator)` turning its traced
    /// output into real activations: `code / (2^A - 1)`, or `score / den`
    /// for logits.
    pub fn dequant_scales(&self) -> Vec<(i64, i64)> {
        self.linear_layers()
            .map(|l| match l.output_bits {
                Some(b) => (1, code_max(b)),
                None => (1, l.requant.denominator()),
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        write_header(&mut w, KIND_INTEGER_MODEL, self.weight_bits, self.activation_bits, self.input_bits, &self.input_shape, self.classes, self.records.len())?;
        for record in &self.records {
            let mut p = Writer::new();
            let tag = match record {
                Record::Linear(r) => {
                    let tag = match r.geometry {
                        Linear::Conv { in_channels, out_channels, kernel, stride, padding } => {
                            for v in [in_channels, out_channels, kernel, stride, padding] {
                                p.len(v)?;
                            }
                            TAG_CONV
                        }
                        Linear::Dense { fan_in, units } => {
                            p.len(fan_in)?;
                            p.len(units)?;
                            TAG_DENSE
                        }
                    };
                    p.u8(r.weight_bits);
                    p.u8(r.input_bits);
                    p.u8(r.output_bits.unwrap_or(0));
                    p.u32(r.alpha.get());
                    p.i64(r.requant.numerator());
                    p.i64(r.requant.denominator());
                    p.u32(r.requant.multiplier());
                    p.u8(r.requant.shift());
                    p.len(r.weights.len())?;
                    for &q in r.weights.data() {
                        p.i16(q);
                    }
                    tag
                }
                Record::MaxPool { size } => {
                    p.len(*size)?;
                    TAG_MAXPOOL
                }
                Record::Flatten => TAG_FLATTEN,
            };
            w.record(tag, &p.into_inner())?;
        }
        Ok(w.finish_with_crc())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = check_crc(bytes)?;
        let mut r = Reader::new(body);
        let h = read_header(&mut r)?;
        if h.kind != KIND_INTEGER_MODEL {
            return Err(Error::Format { offset: 7, reason: format!("file kind {} is not an integer model", h.kind) });
        }
        let mut records = Vec::with_capacity(h.records);
        for _ in 0..h.records {
            let at = r.offset();
            let (tag, mut p) = r.record()?;
            let record = match tag {
                TAG_CONV | TAG_DENSE => {
                    let geometry = if tag == TAG_CONV {
                        Linear::Conv {
                            in_channels: p.len()?,
                            out_channels: p.len()?,
                            kernel: p.len()?,
                            stride: p.len()?,
                            padding: p.len()?,
                        }
                    } else {
                        Linear::Dense { fan_in: p.len()?, units: p.len()? }
                    };
                    let weight_bits = p.u8()?;
                    let input_bits = p.u8()?;
                    let output_bits = match p.u8()? {
                        0 => None,
                        b => Some(b),
                    };
                    let alpha = ScaleFactor::new(p.u32()? as i64).map_err(|e| p.error(e.to_string()))?;
                    let (num, den, mult, shift) = (p.i64()?, p.i64()?, p.u32()?, p.u8()?);
                    let requant =
                        RequantParams::from_parts(num, den, mult, shift).map_err(|e| p.error(e.to_string()))?;
                    let count = p.len()?;
                    let data = (0..count).map(|_| p.i16()).collect::<Result<Vec<_>>>()?;
                    p.end()?;
                    check_bits(weight_bits, "weight").map_err(|e| p.error(e.to_string()))?;
                    let weights = IntTensor::new(geometry.weight_shape(), data, weight_bits, CodeKind::Centered)
                        .map_err(|e| p.error(e.to_string()))?;
                    Record::Linear(LinearRecord { geometry, weight_bits, input_bits, output_bits, alpha, requant, weights })
                }
                TAG_MAXPOOL => {
                    let size = p.len()?;
                    p.end()?;
                    Record::MaxPool { size }
                }
                TAG_FLATTEN => {
                    p.end()?;
                    Record::Flatten
                }
                other => {
                    return Err(Error::Format {
                        offset: at,
                        reason: format!("record tag {other} is not allowed in an integer model"),
                    })
                }
            };
            records.push(record);
        }
        r.end()?;
        Self::new(h.weight_bits, h.activation_bits, h.input_bits, h.input_shape, h.classes, records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) struct Header {
    pub kind: u8,
    pub weight_bits: u8,
    pub activation_bits: u8,
    pub input_bits: u8,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub records: usize,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn write_header(
    w: &mut Writer,
    kind: u8,
    weight_bits: u8,
    activation_bits: u8,
    input_bits: u8,
    input_shape: &[usize],
    classes: usize,
    records: usize,
) -> Result<()> {
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u8(LITTLE_ENDIAN);
    w.u8(kind);
    w.u8(weight_bits);
    w.u8(activation_bits);
    w.u8(input_bits);
    w.u8(0);
    w.len(input_shape.len())?;
    for &d in input_shape {
        w.len(d)?;
    }
    w.len(classes)?;
    w.len(records)
}

pub(crate) fn read_header(r: &mut Reader) -> Result<Header> {
    if r.take(4)? != MAGIC {
        return Err(Error::Format { offset: 0, reason: "bad magic".into() });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, reason: format!("unsupported version {version}") });
    }
    if r.u8()? != LITTLE_ENDIAN {
        return Err(Error::Format { offset: 6, reason: "unsupported endianness tag".into() });
    }
    let kind = r.u8()?;
    let (weight_bits, activation_bits, input_bits) = (r.u8()?, r.u8()?, r.u8()?);
    if r.u8()? != 0 {
        return Err(Error::Format { offset: 11, reason: "reserved byte is not zero".into() });
    }
    let rank = r.len()?;
    if rank > 8 {
        return Err(r.error(format!("input rank {rank} too large")));
    }
    let input_shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let classes = r.len()?;
    let records = r.len()?;
    Ok(Header { kind, weight_bits, activation_bits, input_bits, input_shape, classes, records })
}

/// Integer model of a fully frozen student.
pub fn export<T: Scalar>(student: &StudentNet<T>) -> Result<IntegerModel> {
    if !student.is_fully_frozen() {
        return Err(Error::State("only a fully frozen student can be exported".into()));
    }
    let spec = student.spec();
    let mut records = Vec::new();
    let last = student.depth() - 1;
    for (i, block) in student.blocks.iter().enumerate() {
        let s = &block.spec;
        let unsupported = |what: &str| Error::Config(format!("layer {i}: {what} cannot run in integer arithmetic"));
        let weight_bits = s.weight_bits.ok_or_else(|| unsupported("real-valued weights"))?;
        let input_bits = s.input_bits.ok_or_else(|| unsupported("an unquantized input"))?;
        let output_bits = match s.activation {
            Activation::Quantized(b) => Some(b),
            Activation::Identity if i == last => None,
            _ => return Err(unsupported("an unquantized activation")),
        };
        let alpha = block.alpha().ok_or_else(|| Error::State(format!("layer {i} has no scale factor")))?;
        let codes = block.weight_codes()?.expect("weight bits checked");
        records.push(Record::Linear(LinearRecord {
            geometry: s.linear,
            weight_bits,
            input_bits,
            output_bits,
            alpha,
            requant: layer_scale(alpha, weight_bits, input_bits, output_bits)?,
            weights: center_weight_codes(&codes)?,
        }));
        if let Some(size) = s.pool {
            records.push(Record::MaxPool { size });
        }
        if s.flatten {
            records.push(Record::Flatten);
        }
    }
    IntegerModel::new(
        spec.quant.weight_bits,
        spec.quant.activation_bits,
        spec.input_bits,
        spec.input_shape.clone(),
        spec.classes,
        records,
    )
}
