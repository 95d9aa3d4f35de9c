//! Integer-only inference over an [`IntegerModel`].

use crate::error::{Error, Result};
use crate::network::Linear;
use crate::tensor::{int_conv2d, int_matmul, CodeKind, IntTensor};

use super::model::{IntegerModel, LinearRecord, Record};
use super::requant::{requantize, RequantMode};

fn with_layer(layer: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Overflow { layer: None } => Error::Overflow { layer: Some(layer) },
        other => other,
    }
}

fn max_pool(x: &IntTensor<i64>, size: usize) -> Result<IntTensor<i64>> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::Dimension(format!("maxpool wants NCHW, got {:?}", x.shape())));
    };
    let (oh, ow) = (h / size, w / size);
    let d = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = d[base + oi * size * w + oj * size];
                for di in 0..size {
                    for dj in 0..size {
                        best = best.max(d[base + (oi * size + di) * w + oj * size + dj]);
                    }
                }
                out.push(best);
            }
        }
    }
    IntTensor::new(vec![n, c, oh, ow], out, x.bits(), x.kind())
}

fn transpose(w: &IntTensor<i16>) -> Result<IntTensor<i16>> {
    let &[rows, cols] = w.shape() else {
        return Err(Error::Dimension(format!("dense weights must be 2-d, got {:?}", w.shape())));
    };
    let d = w.data();
    let t = (0..rows * cols).map(|i| d[(i % rows) * cols + i / rows]).collect();
    IntTensor::new(vec![cols, rows], t, w.bits(), w.kind())
}

/// Integer accumulators of one linear layer.
fn accumulate(r: &LinearRecord, x: &IntTensor<i64>, layer: usize) -> Result<IntTensor<i64>> {
    match r.geometry {
        Linear::Conv { stride, padding, .. } => int_conv2d(x, &r.weights, stride, padding),
        Linear::Dense { .. } => int_matmul(x, &transpose(&r.weights)?),
    }
    .map_err(with_layer(layer))
}

/// Run the model on `[N, input...]` codes. With `trace`, every linear
/// layer's final output (after any pool and flatten) is recorded.
fn run(
    model: &IntegerModel,
    input: &IntTensor<u8>,
    mode: RequantMode,
    mut trace: Option<&mut Vec<IntTensor<i64>>>,
) -> Result<IntTensor<i64>> {
    if input.bits() != model.input_bits() || input.shape()[1..] != model.input_shape()[..] {
        return Err(Error::Dimension(format!(
            "model takes {}-bit inputs of shape {:?}, got {}-bit {:?}",
            model.input_bits(),
            model.input_shape(),
            input.bits(),
            input.shape()
        )));
    }
    let mut x = input.widen();
    let mut layer = 0;
    for record in model.records() {
        match record {
            Record::Linear(r) => {
                if layer > 0 {
                    if let Some(t) = trace.as_mut() {
                        t.push(x.clone());
                    }
                }
                let acc = accumulate(r, &x, layer)?;
                let shape = acc.shape().to_vec();
                x = match r.output_bits {
                    Some(bits) => {
                        let max = (1i64 << bits) - 1;
                        let codes = acc.data().iter().map(|&a| requantize(a, &r.requant, mode, max)).collect();
                        IntTensor::new(shape, codes, bits, CodeKind::Unsigned)?
                    }
                    None => {
                        let k = r.requant.numerator();
                        let scores = acc
                            .data()
                            .iter()
                            .map(|&a| a.checked_mul(k).ok_or(Error::Overflow { layer: Some(layer) }))
                            .collect::<Result<Vec<_>>>()?;
                        IntTensor::accumulator(shape, scores)?
                    }
                };
                layer += 1;
            }
            Record::MaxPool { size } => x = max_pool(&x, *size)?,
            Record::Flatten => {
                let n = x.shape()[0];
                let rest = x.len() / n;
                x = x.reshape(vec![n, rest])?;
            }
        }
    }
    if let Some(t) = trace {
        t.push(x.clone());
    }
    Ok(x)
}

/// Integer logit scores `[N, classes]`; the prediction is their argmax.
pub fn infer(model: &IntegerModel, input: &IntTensor<u8>, mode: RequantMode) -> Result<IntTensor<i64>> {
    run(model, input, mode, None)
}

/// Scores plus every linear layer's output codes, in layer order.
pub fn infer_trace(
    model: &IntegerModel,
    input: &IntTensor<u8>,
    mode: RequantMode,
) -> Result<(IntTensor<i64>, Vec<IntTensor<i64>>)> {
    let mut trace = Vec::new();
    let out = run(model, input, mode, Some(&mut trace))?;
    Ok((out, trace))
}

/// Per hidden layer, the largest code difference between the two
/// requantization modes when both see the same exact-mode layer input.
pub fn mode_deviation(model: &IntegerModel, input: &IntTensor<u8>) -> Result<Vec<i64>> {
    let (_, trace) = infer_trace(model, input, RequantMode::ExactRational)?;
    let mut out = Vec::new();
    for (layer, r) in model.linear_layers().enumerate() {
        let Some(bits) = r.output_bits else { break };
        let x = if layer == 0 { input.widen() } else { trace[layer - 1].clone() };
        let max = (1i64 << bits) - 1;
        let acc = accumulate(r, &x, layer)?;
        let dev = acc
            .data()
            .iter()
            .map(|&a| {
                let e = requantize(a, &r.requant, RequantMode::ExactRational, max);
                let f = requantize(a, &r.requant, RequantMode::MultiplyShift, max);
                (e - f).abs()
            })
            .max()
            .unwrap_or(0);
        out.push(dev);
    }
    Ok(out)
}
