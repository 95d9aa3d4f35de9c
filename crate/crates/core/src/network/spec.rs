use std::fmt;

use crate::error::{Error, Result};
use crate::quant::QuantConfig;
use crate::tensor::conv_output_size;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Dense { units: usize },
    BatchNorm,
    Scale,
    Clip01,
    MaxPool { size: usize },
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Meaningful on conv/dense layers.
    pub quantize_weights: bool,
    /// Meaningful on clip01 layers: quantize right after clipping.
    pub quantize_activations: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self { kind, quantize_weights: true, quantize_activations: true }
    }

    pub fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::new(LayerKind::Conv { out_channels, kernel, stride, padding })
    }

    pub fn dense(units: usize) -> Self {
        Self::new(LayerKind::Dense { units })
    }

    fn is_linear(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }

    /// Parse one token of the layer list syntax:
    /// `conv:OUT:K:STRIDE:PAD`, `dense:UNITS`, `bn`, `scale`, `clip`,
    /// `pool:SIZE`, `flatten`. A trailing `:fp` on conv, dense or clip keeps
    /// that layer's weights or activations unquantized.
    pub fn parse(token: &str) -> Result<Self> {
        let mut parts: Vec<&str> = token.split(':').collect();
        let fp = parts.len() > 1 && parts.last() == Some(&"fp");
        if fp {
            parts.pop();
        }
        let num = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Config(format!("bad number {s:?} in layer {token:?}")))
        };
        let kind = match parts.as_slice() {
            ["conv", o, k, s, p] => LayerKind::Conv { out_channels: num(o)?, kernel: num(k)?, stride: num(s)?, padding: num(p)? },
            ["dense", u] => LayerKind::Dense { units: num(u)? },
            ["bn"] => LayerKind::BatchNorm,
            ["scale"] => LayerKind::Scale,
            ["clip"] => LayerKind::Clip01,
            ["pool", s] => LayerKind::MaxPool { size: num(s)? },
            ["flatten"] => LayerKind::Flatten,
            _ => return Err(Error::Config(format!("unknown layer {token:?}"))),
        };
        let mut spec = Self::new(kind);
        if fp {
            match kind {
                LayerKind::Conv { .. } | LayerKind::Dense { .. } => spec.quantize_weights = false,
                LayerKind::Clip01 => spec.quantize_activations = false,
                _ => return Err(Error::Config(format!("`:fp` not allowed on {token:?}"))),
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LayerKind::Conv { out_channels, kernel, stride, padding } => {
                write!(f, "conv:{out_channels}:{kernel}:{stride}:{padding}")?
            }
            LayerKind::Dense { units } => write!(f, "dense:{units}")?,
            LayerKind::BatchNorm => write!(f, "bn")?,
            LayerKind::Scale => write!(f, "scale")?,
            LayerKind::Clip01 => write!(f, "clip")?,
            LayerKind::MaxPool { size } => write!(f, "pool:{size}")?,
            LayerKind::Flatten => write!(f, "flatten")?,
        }
        let fp = match self.kind {
            LayerKind::Conv { .. } | LayerKind::Dense { .. } => !self.quantize_weights,
            LayerKind::Clip01 => !self.quantize_activations,
            _ => false,
        };
        if fp {
            write!(f, ":fp")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linear {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Dense { fan_in: usize, units: usize },
}

impl Linear {
    pub fn fan_in(&self) -> usize {
        match *self {
            Linear::Conv { in_channels, kernel, .. } => in_channels * kernel * kernel,
            Linear::Dense { fan_in, .. } => fan_in,
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            Linear::Conv { out_channels, .. } => out_channels,
            Linear::Dense { units, .. } => units,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            Linear::Conv { in_channels, out_channels, kernel, .. } => vec![out_channels, in_channels, kernel, kernel],
            Linear::Dense { fan_in, units } => vec![units, fan_in],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    BatchNorm,
    Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Raw block output (logits).
    Identity,
    /// Clip to `[0, 1]` without quantizing.
    Clip,
    /// Clip to `[0, 1]` and quantize to the given bit-width.
    Quantized(u8),
}

/// One distillation unit: linear op, normalization (BN or scale), optional
/// clip/quantize, then any trailing pool and flatten.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub index: usize,
    pub linear: Linear,
    pub norm: NormKind,
    /// `None` keeps real-valued weights.
    pub weight_bits: Option<u8>,
    pub activation: Activation,
    pub pool: Option<usize>,
    pub flatten: bool,
    /// Bit-width of the codes this block consumes, when its input is quantized.
    pub input_bits: Option<u8>,
    /// Per-sample shapes.
    pub input_shape: Vec<usize>,
    pub linear_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub quant: QuantConfig,
    /// Per-sample input shape: `[C, H, W]` for images or `[features]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    /// Bit-width of input pixel codes.
    pub input_bits: u8,
}

impl NetworkSpec {
    pub fn new(
        layers: Vec<LayerSpec>,
        quant: QuantConfig,
        input_shape: impl Into<Vec<usize>>,
        classes: usize,
        input_bits: u8,
    ) -> Result<Self> {
        let spec = Self { layers, quant, input_shape: input_shape.into(), classes, input_bits };
        if spec.input_shape.is_empty() || spec.input_shape.contains(&0) {
            return Err(Error::Config(format!("bad input shape {:?}", spec.input_shape)));
        }
        spec.blocks()?;
        Ok(spec)
    }

    pub fn parse_layers(text: &str) -> Result<Vec<LayerSpec>> {
        text.split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(LayerSpec::parse)
            .collect()
    }

    pub fn layers_string(&self) -> String {
        self.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ")
    }

    /// Group layers into blocks and chain-check every shape.
    pub fn blocks(&self) -> Result<Vec<BlockSpec>> {
        let has_bn = self.layers.iter().any(|l| l.kind == LayerKind::BatchNorm);
        let has_scale = self.layers.iter().any(|l| l.kind == LayerKind::Scale);
        if has_bn && has_scale {
            return Err(Error::Config("batchnorm and scale layers cannot share a network".into()));
        }
        let mut shape = self.input_shape.clone();
        let mut input_bits = Some(self.input_bits);
        let mut blocks = Vec::new();
        let mut i = 0;
        let layers = &self.layers;
        while i < layers.len() {
            let head = layers[i];
            let index = blocks.len();
            let (wbits, abits) = self.quant.bits_for(index);
            let input_shape = shape.clone();
            let linear = match head.kind {
                LayerKind::Conv { out_channels, kernel, stride, padding } => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(Error::Config(format!("block {index}: conv needs a CHW input, got {shape:?}")));
                    };
                    let oh = conv_output_size(h, kernel, stride, padding);
                    let ow = conv_output_size(w, kernel, stride, padding);
                    let (Some(oh), Some(ow)) = (oh, ow) else {
                        return Err(Error::Config(format!("block {index}: kernel {kernel} does not fit {h}x{w}")));
                    };
                    if out_channels == 0 {
                        return Err(Error::Config(format!("block {index}: zero output channels")));
                    }
                    shape = vec![out_channels, oh, ow];
                    Linear::Conv { in_channels: c, out_channels, kernel, stride, padding }
                }
                LayerKind::Dense { units } => {
                    let &[fan_in] = shape.as_slice() else {
                        return Err(Error::Config(format!("block {index}: dense needs a flat input, got {shape:?}")));
                    };
                    if units == 0 {
                        return Err(Error::Config(format!("block {index}: zero units")));
                    }
                    shape = vec![units];
                    Linear::Dense { fan_in, units }
                }
                other => {
                    return Err(Error::Config(format!("layer {i}: {other:?} must follow a conv or dense layer")));
                }
            };
            i += 1;
            let norm = match layers.get(i).map(|l| l.kind) {
                Some(LayerKind::BatchNorm) => NormKind::BatchNorm,
                Some(LayerKind::Scale) => NormKind::Scale,
                _ => return Err(Error::Config(format!("block {index}: linear layer must be followed by bn or scale"))),
            };
            i += 1;
            let linear_shape = shape.clone();
            let mut activation = Activation::Identity;
            if let Some(l) = layers.get(i).filter(|l| l.kind == LayerKind::Clip01) {
                activation = if l.quantize_activations { Activation::Quantized(abits) } else { Activation::Clip };
                i += 1;
            }
            let mut pool = None;
            if let Some(LayerKind::MaxPool { size }) = layers.get(i).map(|l| l.kind) {
                let &[c, h, w] = shape.as_slice() else {
                    return Err(Error::Config(format!("block {index}: pool needs a CHW input")));
                };
                if size == 0 || size > h || size > w {
                    return Err(Error::Config(format!("block {index}: pool {size} does not fit {h}x{w}")));
                }
                shape = vec![c, h / size, w / size];
                pool = Some(size);
                i += 1;
            }
            let mut flatten = false;
            if layers.get(i).map(|l| l.kind) == Some(LayerKind::Flatten) {
                shape = vec![shape.iter().product()];
                flatten = true;
                i += 1;
            }
            if let Some(l) = layers.get(i).filter(|l| !l.is_linear()) {
                return Err(Error::Config(format!("layer {i}: unexpected {:?} inside block {index}", l.kind)));
            }
            blocks.push(BlockSpec {
                index,
                linear,
                norm,
                weight_bits: head.quantize_weights.then_some(wbits),
                activation,
                pool,
                flatten,
                input_bits,
                input_shape,
                linear_shape,
                output_shape: shape.clone(),
            });
            input_bits = match activation {
                Activation::Quantized(b) => Some(b),
                _ => None,
            };
        }
        if blocks.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        if shape != [self.classes] {
            return Err(Error::Config(format!("network output {shape:?} does not match {} classes", self.classes)));
        }
        Ok(blocks)
    }

    pub fn norm_kind(&self) -> Result<NormKind> {
        Ok(self.blocks()?[0].norm)
    }

    /// The BN-free twin: every batchnorm becomes a scale layer.
    pub fn to_student(&self) -> Self {
        let mut s = self.clone();
        for l in &mut s.layers {
            if l.kind == LayerKind::BatchNorm {
                l.kind = LayerKind::Scale;
            }
        }
        s
    }

    /// Exempt the first and last linear layers from weight quantization.
    pub fn exempt_first_last(&mut self) {
        let linear: Vec<usize> = (0..self.layers.len()).filter(|&i| self.layers[i].is_linear()).collect();
        for i in [linear.first(), linear.last()].into_iter().flatten() {
            self.layers[*i].quantize_weights = false;
        }
    }
}

/// Teacher and student must agree layer for layer except batchnorm ↔ scale.
pub fn check_duality(teacher: &NetworkSpec, student: &NetworkSpec) -> Result<()> {
    if teacher.norm_kind()? != NormKind::BatchNorm {
        return Err(Error::Config("teacher network must use batchnorm".into()));
    }
    if student.norm_kind()? != NormKind::Scale {
        return Err(Error::Config("student network must use scale layers".into()));
    }
    if teacher.to_student() != *student {
        return Err(Error::Config("student is not the batchnorm-free twin of the teacher".into()));
    }
    Ok(())
}
