use num_traits::PrimInt;

use crate::error::{dim, Error, Result};

use super::ops::{conv_output_size, valid_range};
use super::IntTensor;

/// Worst-case accumulator magnitude of a `fan_in`-term product sum.
pub fn max_abs_bound(fan_in: usize, lhs: u128, rhs: u128) -> u128 {
    (fan_in as u128).saturating_mul(lhs).saturating_mul(rhs)
}

fn check_bound(fan_in: usize, lhs: u128, rhs: u128) -> Result<()> {
    if max_abs_bound(fan_in, lhs, rhs) > i64::MAX as u128 {
        return Err(Error::Overflow { layer: None });
    }
    Ok(())
}

/// Exact integer matrix product in 64-bit accumulators.
pub fn int_matmul<A, B>(a: &IntTensor<A>, b: &IntTensor<B>) -> Result<IntTensor<i64>>
where
    A: PrimInt + Into<i64>,
    B: PrimInt + Into<i64>,
{
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(dim(format!("int_matmul wants 2-d operands, got {:?} and {:?}", a.shape(), b.shape())));
    };
    if k != k2 {
        return Err(dim(format!("int_matmul inner dimensions {k} vs {k2}")));
    }
    check_bound(k, a.magnitude_bound(), b.magnitude_bound())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0i64; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av: i64 = ad[i * k + kk].into();
            if av == 0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[kk * n..(kk + 1) * n]) {
                *o += av * bv.into();
            }
        }
    }
    IntTensor::accumulator(vec![m, n], out)
}

/// Exact integer cross-correlation (NCHW input, OIHW kernel) in 64-bit accumulators.
pub fn int_conv2d<A, B>(input: &IntTensor<A>, kernel: &IntTensor<B>, stride: usize, padding: usize) -> Result<IntTensor<i64>>
where
    A: PrimInt + Into<i64>,
    B: PrimInt + Into<i64>,
{
    let (&[n, c, h, w], &[o, kc, kh, kw]) = (input.shape(), kernel.shape()) else {
        return Err(dim(format!(
            "int_conv2d wants NCHW input and OIHW kernel, got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    };
    if c != kc {
        return Err(dim(format!("int_conv2d channels {c} vs kernel {kc}")));
    }
    let (Some(oh), Some(ow)) = (conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)) else {
        return Err(dim(format!("kernel {kh}x{kw} does not fit {h}x{w} input")));
    };
    check_bound(c * kh * kw, input.magnitude_bound(), kernel.magnitude_bound())?;

    let xd: Vec<i64> = input.data().iter().map(|&v| v.into()).collect();
    let kd = kernel.data();
    let plane = oh * ow;
    let mut out = vec![0i64; n * o * plane];
    for b in 0..n {
        for oc in 0..o {
            let dst = &mut out[(b * o + oc) * plane..(b * o + oc + 1) * plane];
            for ic in 0..c {
                let src = &xd[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                for ki in 0..kh {
                    let (ilo, ihi) = valid_range(oh, h, ki, stride, padding);
                    for kj in 0..kw {
                        let wv: i64 = kd[((oc * c + ic) * kh + ki) * kw + kj].into();
                        if wv == 0 {
                            continue;
                        }
                        let (jlo, jhi) = valid_range(ow, w, kj, stride, padding);
                        for oi in ilo..ihi {
                            let row = &src[(oi * stride + ki - padding) * w..][..w];
                            let drow = &mut dst[oi * ow..(oi + 1) * ow];
                            if stride == 1 {
                                let x0 = jlo + kj - padding;
                                for (d, &xv) in drow[jlo..jhi].iter_mut().zip(&row[x0..x0 + (jhi - jlo)]) {
                                    *d += wv * xv;
                                }
                            } else {
                                for oj in jlo..jhi {
                                    drow[oj] += wv * row[oj * stride + kj - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    IntTensor::accumulator(vec![n, o, oh, ow], out)
}
