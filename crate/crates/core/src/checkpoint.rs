//! Teacher and student checkpoints.
//!
//! Same header and CRC trailer as the integer model file, with kind 1
//! (teacher) or 2 (student). Records, in block order after the spec:
//!
//! ```text
//! 32 spec     UTF-8 "layers=<layer list>;overrides=<block:w:a,...>"
//! 17 weights  block:u32 bits:u8 count:u32, then i16 centered codes
//!             (bits > 0, grid weights) or f64 values (bits = 0)
//! 16 bn       block:u32 channels:u32 eps:f64 momentum:f64
//!             gamma, beta, running mean, running var: f64*channels each
//!  5 scale    block:u32 alpha:u32 (0 = unset) frozen:u8
//! ```
//!
//! A teacher block is a weights record then a bn record; a student block
//! is a weights record then a scale record.

use std::path::Path;

use crate::bytes::{check_crc, Reader, Writer};
use crate::error::{Error, Result};
use crate::network::{Block, BnParams, NetworkSpec, StudentNet, TeacherNet};
use crate::quant::{center_weight_codes, dequantize_centered, QuantConfig, ScaleFactor};
use crate::runtime::{read_header, write_header, KIND_STUDENT, KIND_TEACHER};
use crate::scalar::Scalar;
use crate::tensor::{CodeKind, IntTensor, Tensor};

const TAG_SCALE: u8 = 5;
const TAG_BN: u8 = 16;
const TAG_WEIGHTS: u8 = 17;
const TAG_SPEC: u8 = 32;

/// `layers=...;overrides=...` description of a network's layers and
/// per-block bit-width overrides.
pub fn spec_text(spec: &NetworkSpec) -> String {
    let overrides: Vec<String> =
        spec.quant.overrides.iter().map(|(b, (w, a))| format!("{b}:{w}:{a}")).collect();
    format!("layers={};overrides={}", spec.layers_string(), overrides.join(","))
}

/// Inverse of [`spec_text`] given the header fields.
pub fn parse_spec_text(
    text: &str,
    weight_bits: u8,
    activation_bits: u8,
    input_shape: Vec<usize>,
    classes: usize,
    input_bits: u8,
) -> Result<NetworkSpec> {
    let bad = || Error::Config(format!("malformed spec text {text:?}"));
    let (layers, overrides) = text.split_once(';').ok_or_else(bad)?;
    let layers = layers.strip_prefix("layers=").ok_or_else(bad)?;
    let overrides = overrides.strip_prefix("overrides=").ok_or_else(bad)?;
    let mut quant = QuantConfig::new(weight_bits, activation_bits)?;
    for item in overrides.split(',').filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        let [b, w, a] = parts.as_slice() else { return Err(bad()) };
        quant = quant.with_override(
            b.parse().map_err(|_| bad())?,
            w.parse().map_err(|_| bad())?,
            a.parse().map_err(|_| bad())?,
        )?;
    }
    NetworkSpec::new(NetworkSpec::parse_layers(layers)?, quant, input_shape, classes, input_bits)
}

fn write_start(kind: u8, spec: &NetworkSpec, records: usize) -> Result<Writer> {
    let mut w = Writer::new();
    write_header(
        &mut w,
        kind,
        spec.quant.weight_bits,
        spec.quant.activation_bits,
        spec.input_bits,
        &spec.input_shape,
        spec.classes,
        records,
    )?;
    w.record(TAG_SPEC, spec_text(spec).as_bytes())?;
    Ok(w)
}

fn weights_payload<T: Scalar>(index: usize, block: &Block<T>) -> Result<Vec<u8>> {
    let mut p = Writer::new();
    p.len(index)?;
    let w = block.weight();
    match block.weight_codes()? {
        Some(codes) if *w == block.effective_weight()? => {
            p.u8(codes.bits());
            p.len(w.len())?;
            for &q in center_weight_codes(&codes)?.data() {
                p.i16(q);
            }
        }
        _ => {
            p.u8(0);
            p.len(w.len())?;
            for v in w.data() {
                p.f64(v.to_f64());
            }
        }
    }
    Ok(p.into_inner())
}

fn read_block<T: Scalar>(r: &mut Reader, index: usize, spec: crate::network::BlockSpec) -> Result<Block<T>> {
    let (tag, mut p) = r.record()?;
    if tag != TAG_WEIGHTS {
        return Err(p.error(format!("expected weights record for block {index}, found tag {tag}")));
    }
    if p.len()? != index {
        return Err(p.error(format!("weights record out of order at block {index}")));
    }
    let bits = p.u8()?;
    let count = p.len()?;
    let shape = spec.linear.weight_shape();
    if count != shape.iter().product::<usize>() {
        return Err(p.error(format!("block {index} holds {count} weights, expected {shape:?}")));
    }
    let grid = spec.weight_bits;
    let weight = if bits == 0 {
        let data = (0..count).map(|_| p.f64().map(T::from_f64)).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)?
    } else {
        if Some(bits) != grid {
            return Err(p.error(format!("block {index} stores {bits}-bit codes but uses {grid:?}")));
        }
        let data = (0..count).map(|_| p.i16()).collect::<Result<Vec<_>>>()?;
        let codes = IntTensor::new(shape, data, bits, CodeKind::Centered).map_err(|e| p.error(e.to_string()))?;
        dequantize_centered(&codes)
    };
    p.end()?;
    let block = Block::new(spec, weight)?;
    if bits == 0 && grid.is_some() && *block.weight() == block.effective_weight()? {
        return Err(p.error(format!("block {index} stores grid weights as reals")));
    }
    Ok(block)
}

fn check_kind(kind: u8, want: u8) -> Result<()> {
    if kind != want {
        return Err(Error::Format { offset: 7, reason: format!("file kind {kind}, expected {want}") });
    }
    Ok(())
}

fn read_spec(r: &mut Reader, want: u8) -> Result<(NetworkSpec, usize)> {
    let h = read_header(r)?;
    check_kind(h.kind, want)?;
    let (tag, p) = r.record()?;
    if tag != TAG_SPEC {
        return Err(p.error(format!("expected spec record, found tag {tag}")));
    }
    let mut p = p;
    let text = std::str::from_utf8(p.take(p.remaining())?).map_err(|_| r.error("spec text is not UTF-8"))?;
    let spec = parse_spec_text(text, h.weight_bits, h.activation_bits, h.input_shape, h.classes, h.input_bits)
        .map_err(|e| r.error(e.to_string()))?;
    if spec_text(&spec) != text {
        return Err(r.error("spec text is not canonical"));
    }
    let depth = spec.blocks()?.len();
    if h.records != 1 + 2 * depth {
        return Err(r.error(format!("{} records for {depth} blocks", h.records)));
    }
    Ok((spec, depth))
}

impl<T: Scalar> TeacherNet<T> {
    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let mut w = write_start(KIND_TEACHER, self.spec(), 1 + 2 * self.depth())?;
        for (i, b) in self.blocks.iter().enumerate() {
            w.record(TAG_WEIGHTS, &weights_payload(i, b)?)?;
            let bn = b.bn().expect("teacher blocks carry batchnorm");
            let mut p = Writer::new();
            p.len(i)?;
            p.len(bn.channels())?;
            p.f64(bn.epsilon.to_f64());
            p.f64(bn.momentum.to_f64());
            for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                for x in v {
                    p.f64(x.to_f64());
                }
            }
            w.record(TAG_BN, &p.into_inner())?;
        }
        Ok(w.finish_with_crc())
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(check_crc(bytes)?);
        let (spec, _) = read_spec(&mut r, KIND_TEACHER)?;
        let mut blocks = Vec::new();
        for (i, bs) in spec.blocks()?.into_iter().enumerate() {
            let channels = bs.linear.out_channels();
            let mut block = read_block::<T>(&mut r, i, bs)?;
            let (tag, mut p) = r.record()?;
            if tag != TAG_BN || p.len()? != i {
                return Err(p.error(format!("expected batchnorm record for block {i}")));
            }
            if p.len()? != channels {
                return Err(p.error(format!("batchnorm of block {i} must have {channels} channels")));
            }
            let epsilon = T::from_f64(p.f64()?);
            let momentum = T::from_f64(p.f64()?);
            let mut vec = || (0..channels).map(|_| p.f64().map(T::from_f64)).collect::<Result<Vec<_>>>();
            let bn = BnParams { gamma: vec()?, beta: vec()?, running_mean: vec()?, running_var: vec()?, epsilon, momentum };
            p.end()?;
            *block.bn_mut().ok_or_else(|| Error::Config(format!("block {i} has no batchnorm")))? = bn;
            blocks.push(block);
        }
        r.end()?;
        TeacherNet::from_blocks(spec, blocks)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read(path)?)
    }
}

impl<T: Scalar> StudentNet<T> {
    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let mut w = write_start(KIND_STUDENT, self.spec(), 1 + 2 * self.depth())?;
        for (i, b) in self.blocks.iter().enumerate() {
            w.record(TAG_WEIGHTS, &weights_payload(i, b)?)?;
            let mut p = Writer::new();
            p.len(i)?;
            p.u32(b.alpha().map_or(0, |a| a.get()));
            p.u8(u8::from(self.is_frozen(i)));
            w.record(TAG_SCALE, &p.into_inner())?;
        }
        Ok(w.finish_with_crc())
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(check_crc(bytes)?);
        let (spec, _) = read_spec(&mut r, KIND_STUDENT)?;
        let mut blocks = Vec::new();
        let mut frozen = Vec::new();
        for (i, bs) in spec.blocks()?.into_iter().enumerate() {
            let mut block = read_block::<T>(&mut r, i, bs)?;
            let (tag, mut p) = r.record()?;
            if tag != TAG_SCALE || p.len()? != i {
                return Err(p.error(format!("expected scale record for block {i}")));
            }
            let alpha = p.u32()?;
            let f = p.u8()?;
            p.end()?;
            if alpha > 0 {
                block.set_alpha(ScaleFactor::new(alpha as i64)?)?;
            }
            let on_grid = block.weight_codes()?.is_none() || *block.weight() == block.effective_weight()?;
            match f {
                0 => frozen.push(false),
                1 if alpha > 0 && on_grid => frozen.push(true),
                _ => return Err(p.error(format!("invalid frozen flag for block {i}"))),
            }
            blocks.push(block);
        }
        r.end()?;
        let mut net = StudentNet::from_blocks(spec, blocks)?;
        for (i, f) in frozen.into_iter().enumerate() {
            if f {
                net.freeze(i)?;
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read(path)?)
    }
}
