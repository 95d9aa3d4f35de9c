use crate::error::{dim, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Output spatial extent of a convolution or `None` when the kernel does not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output positions whose tap `k` lands inside `[0, len)`.
#[inline]
pub(crate) fn valid_range(out: usize, len: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    // position = o * stride + k - padding
    let lo = if k >= padding { 0 } else { (padding - k).div_ceil(stride) };
    let hi = if len + padding <= k {
        0
    } else {
        ((len + padding - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// `a (m x k) · b (k x n)`. Each output accumulates over the inner index in
/// ascending order starting from zero.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(dim(format!("matmul wants 2-d operands, got {:?} and {:?}", a.shape(), b.shape())));
    };
    if k != k2 {
        return Err(dim(format!("matmul inner dimensions {k} vs {k2}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = ad[i * k + kk];
            for (o, &bv) in row.iter_mut().zip(&bd[kk * n..(kk + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Fully connected layer without bias: `x (N x in)`, `w (out x in)` → `N x out`.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[n, fan_in], &[units, w_in]) = (x.shape(), w.shape()) else {
        return Err(dim(format!("dense wants 2-d operands, got {:?} and {:?}", x.shape(), w.shape())));
    };
    if fan_in != w_in {
        return Err(dim(format!("dense fan-in {fan_in} vs weight {w_in}")));
    }
    let (xd, wd) = (x.data(), w.data());
    let mut out = Vec::with_capacity(n * units);
    for s in 0..n {
        let xs = &xd[s * fan_in..(s + 1) * fan_in];
        for o in 0..units {
            let wo = &wd[o * fan_in..(o + 1) * fan_in];
            out.push(wo.iter().zip(xs).fold(T::zero(), |acc, (&a, &b)| acc + a * b));
        }
    }
    Tensor::new(vec![n, units], out)
}

pub fn dense_grad_weight<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fan_in) = (x.shape()[0], x.shape()[1]);
    let units = grad_out.shape()[1];
    if grad_out.shape()[0] != n {
        return Err(dim("dense gradient batch mismatch"));
    }
    let mut dw = vec![T::zero(); units * fan_in];
    for s in 0..n {
        let xs = &x.data()[s * fan_in..(s + 1) * fan_in];
        for o in 0..units {
            let g = grad_out.data()[s * units + o];
            for (d, &xv) in dw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xs) {
                *d += g * xv;
            }
        }
    }
    Tensor::new(vec![units, fan_in], dw)
}

pub fn dense_grad_input<T: Scalar>(w: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (units, fan_in) = (w.shape()[0], w.shape()[1]);
    let n = grad_out.shape()[0];
    if grad_out.shape()[1] != units {
        return Err(dim("dense gradient width mismatch"));
    }
    let mut dx = vec![T::zero(); n * fan_in];
    for s in 0..n {
        let row = &mut dx[s * fan_in..(s + 1) * fan_in];
        for o in 0..units {
            let g = grad_out.data()[s * units + o];
            for (d, &wv) in row.iter_mut().zip(&w.data()[o * fan_in..(o + 1) * fan_in]) {
                *d += g * wv;
            }
        }
    }
    Tensor::new(vec![n, fan_in], dx)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    let (&[n, c, h, w], &[o, kc, kh, kw]) = (input, kernel) else {
        return Err(dim(format!("conv2d wants NCHW input and OIHW kernel, got {input:?} and {kernel:?}")));
    };
    if c != kc {
        return Err(dim(format!("conv2d channels {c} vs kernel {kc}")));
    }
    let oh = conv_output_size(h, kh, stride, padding);
    let ow = conv_output_size(w, kw, stride, padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(ConvGeom { n, c, h, w, o, kh, kw, oh, ow }),
        _ => Err(dim(format!(
            "kernel {kh}x{kw} does not fit {h}x{w} input with padding {padding}, stride {stride}"
        ))),
    }
}

/// 2-d cross-correlation with zero padding. Every output sums its taps in
/// (channel, row, column) order.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = conv_geom(input.shape(), kernel.shape(), stride, padding)?;
    let (xd, kd) = (input.data(), kernel.data());
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.o * plane];
    for n in 0..g.n {
        for o in 0..g.o {
            let dst = &mut out[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
            for c in 0..g.c {
                let src = &xd[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    let (ilo, ihi) = valid_range(g.oh, g.h, ki, stride, padding);
                    for kj in 0..g.kw {
                        let wv = kd[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                        let (jlo, jhi) = valid_range(g.ow, g.w, kj, stride, padding);
                        for oi in ilo..ihi {
                            let row = &src[(oi * stride + ki - padding) * g.w..][..g.w];
                            let drow = &mut dst[oi * g.ow..(oi + 1) * g.ow];
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
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)
}

pub fn conv2d_grad_weight<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(input.shape(), kernel_shape, stride, padding)?;
    if grad_out.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(dim(format!("conv gradient shape {:?}", grad_out.shape())));
    }
    let (xd, gd) = (input.data(), grad_out.data());
    let plane = g.oh * g.ow;
    let mut dw = vec![T::zero(); g.o * g.c * g.kh * g.kw];
    for n in 0..g.n {
        for o in 0..g.o {
            let gsrc = &gd[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
            for c in 0..g.c {
                let src = &xd[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    let (ilo, ihi) = valid_range(g.oh, g.h, ki, stride, padding);
                    for kj in 0..g.kw {
                        let (jlo, jhi) = valid_range(g.ow, g.w, kj, stride, padding);
                        let mut acc = T::zero();
                        for oi in ilo..ihi {
                            let row = &src[(oi * stride + ki - padding) * g.w..][..g.w];
                            let grow = &gsrc[oi * g.ow..(oi + 1) * g.ow];
                            for oj in jlo..jhi {
                                acc += grow[oj] * row[oj * stride + kj - padding];
                            }
                        }
                        dw[((o * g.c + c) * g.kh + ki) * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(kernel_shape.to_vec(), dw)
}

pub fn conv2d_grad_input<T: Scalar>(
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(input_shape, kernel.shape(), stride, padding)?;
    if grad_out.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(dim(format!("conv gradient shape {:?}", grad_out.shape())));
    }
    let (kd, gd) = (kernel.data(), grad_out.data());
    let plane = g.oh * g.ow;
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    for n in 0..g.n {
        for o in 0..g.o {
            let gsrc = &gd[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
            for c in 0..g.c {
                let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    let (ilo, ihi) = valid_range(g.oh, g.h, ki, stride, padding);
                    for kj in 0..g.kw {
                        let wv = kd[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                        let (jlo, jhi) = valid_range(g.ow, g.w, kj, stride, padding);
                        for oi in ilo..ihi {
                            let row = &mut dst[(oi * stride + ki - padding) * g.w..][..g.w];
                            let grow = &gsrc[oi * g.ow..(oi + 1) * g.ow];
                            if stride == 1 {
                                let x0 = jlo + kj - padding;
                                for (d, &gv) in row[x0..x0 + (jhi - jlo)].iter_mut().zip(&grow[jlo..jhi]) {
                                    *d += wv * gv;
                                }
                            } else {
                                for oj in jlo..jhi {
                                    row[oj * stride + kj - padding] += wv * grow[oj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Non-overlapping max pooling with window = stride = `size`; the first
/// maximum in scan order wins. Returns the pooled tensor and, for each
/// output, the flat index of the selected input.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let &[n, c, h, w] = input.shape() else {
        return Err(dim(format!("maxpool wants NCHW, got {:?}", input.shape())));
    };
    if size == 0 || size > h || size > w {
        return Err(dim(format!("pool size {size} does not fit {h}x{w}")));
    }
    let (oh, ow) = (h / size, w / size);
    let xd = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = base + oi * size * w + oj * size;
                for di in 0..size {
                    for dj in 0..size {
                        let at = base + (oi * size + di) * w + oj * size + dj;
                        if xd[at] > xd[best] {
                            best = at;
                        }
                    }
                }
                out.push(xd[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, idx))
}

pub fn maxpool2d_backward<T: Scalar>(grad_out: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(dim("maxpool gradient does not match cached selection"));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        d[i] += g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.data()[i * k + kk] * b.data()[kk * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    pub(crate) fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let [n, c, h, w] = x.shape().try_into().unwrap();
        let [o, _, kh, kw] = k.shape().try_into().unwrap();
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (w + 2 * p - kw) / s + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ii = (i * s + ki) as isize - p as isize;
                                    let jj = (j * s + kj) as isize - p as isize;
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                        continue;
                                    }
                                    acc += k.data()[((oc * c + ic) * kh + ki) * kw + kj]
                                        * x.data()[((b * c + ic) * h + ii as usize) * w + jj as usize];
                                }
                            }
                        }
                        out[((b * o + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, o, oh, ow], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, &[5, 7]);
        let b = rand_tensor(&mut rng, &[7, 3]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &naive_matmul(&a, &b)[..]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let k = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 1, 5, 4]);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_matches_seven_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
        let k = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        assert_eq!(conv2d(&x, &k, 2, 1).unwrap(), naive_conv(&x, &k, 2, 1));
        assert_eq!(conv2d(&x, &k, 1, 2).unwrap(), naive_conv(&x, &k, 1, 2));
        assert_eq!(conv2d(&x, &k, 3, 0).unwrap(), naive_conv(&x, &k, 3, 0));
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        let k = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        assert!(conv2d(&x, &k, 1, 0).is_err());
        assert!(conv2d(&x, &k, 1, 1).is_ok());
    }

    #[test]
    fn conv_gradients_are_adjoint() {
        // <conv(x, k), g> == <x, grad_input(k, g)> == <k, grad_weight(x, g)>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(s, p) in &[(1, 0), (2, 1), (1, 2)] {
            let x = rand_tensor(&mut rng, &[2, 2, 6, 5]);
            let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
            let y = conv2d(&x, &k, s, p).unwrap();
            let g = rand_tensor(&mut rng, y.shape());
            let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
                a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
            };
            let lhs = dot(&y, &g);
            let dx = conv2d_grad_input(&k, &g, x.shape(), s, p).unwrap();
            let dw = conv2d_grad_weight(&x, &g, k.shape(), s, p).unwrap();
            assert!((lhs - dot(&x, &dx)).abs() < 1e-10);
            assert!((lhs - dot(&k, &dw)).abs() < 1e-10);
        }
    }

    #[test]
    fn maxpool_picks_first_maximum() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 3.0, 2.0, 2.0, 3.0, 0.0, 2.0, 1.0]).unwrap();
        let (y, idx) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0]);
        assert_eq!(idx, vec![1, 2]);
        let g = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 5.0]).unwrap();
        let dx = maxpool2d_backward(&g, &idx, x.shape()).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
