use crate::error::{Error, Result};
use crate::quant::{
    center_weight_codes, dequantize_centered, fake_quantize_activation, quantize_weight_tensor, ScaleFactor,
};
use crate::scalar::Scalar;
use crate::tensor::{
    conv2d, conv2d_grad_input, conv2d_grad_weight, dense, dense_grad_input, dense_grad_weight, maxpool2d,
    maxpool2d_backward, IntTensor, Tensor,
};

use super::spec::{Activation, BlockSpec, Linear, NormKind};

pub const BN_EPSILON: (i64, i64) = (1, 100_000);
pub const BN_MOMENTUM: (i64, i64) = (9, 10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization state. Running statistics follow
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    pub momentum: T,
}

impl<T: Scalar> BnParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::from_ratio(BN_EPSILON.0, BN_EPSILON.1),
            momentum: T::from_ratio(BN_MOMENTUM.0, BN_MOMENTUM.1),
        }
    }

    /// Parameters whose eval-mode transform is exactly the identity.
    pub fn identity(channels: usize) -> Self {
        let mut bn = Self::new(channels);
        let var = T::one() - bn.epsilon;
        bn.running_var = vec![var; channels];
        bn
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` of the eval-mode transform `x * scale + shift`.
    pub fn eval_affine(&self) -> Result<(Vec<T>, Vec<T>)> {
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let denom = self.running_var[c] + self.epsilon;
            if !(denom > T::zero()) || !denom.is_finite() {
                return Err(Error::Numeric(format!("batchnorm channel {c} has variance {denom:?}")));
            }
            let s = self.gamma[c] / denom.sqrt();
            scale.push(s);
            shift.push(self.beta[c] - self.running_mean[c] * s);
        }
        Ok((scale, shift))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Norm<T> {
    BatchNorm(BnParams<T>),
    /// `None` until the scale is fitted.
    Scale(Option<ScaleFactor>),
}

#[derive(Debug, Clone)]
pub struct BlockOutput<T> {
    /// Output of the normalization (BN or scale), before clipping.
    pub post_norm: Tensor<T>,
    /// Final block output after clip, quantize, pool and flatten.
    pub output: Tensor<T>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
}

/// Forward state needed by [`Block::backward`].
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    version: u64,
    input: Tensor<T>,
    effective_weight: Tensor<T>,
    bn: Option<BnCache<T>>,
    post_norm: Tensor<T>,
    pool_argmax: Option<Vec<usize>>,
    pre_pool_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BlockGrads<T> {
    /// Gradient w.r.t. the master weights (straight-through for quantized weights).
    pub weight: Tensor<T>,
    pub input: Tensor<T>,
    pub gamma: Option<Vec<T>>,
    pub beta: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct Block<T> {
    pub spec: BlockSpec,
    weight: Tensor<T>,
    pub norm: Norm<T>,
    version: u64,
}

/// Channel index and per-channel element count for a batched tensor laid out
/// as `[N, C, ...]`.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    (n, c, inner)
}

impl<T: Scalar> Block<T> {
    pub fn new(spec: BlockSpec, weight: Tensor<T>) -> Result<Self> {
        if weight.shape() != spec.linear.weight_shape() {
            return Err(Error::Dimension(format!(
                "block {} weight shape {:?}, expected {:?}",
                spec.index,
                weight.shape(),
                spec.linear.weight_shape()
            )));
        }
        let norm = match spec.norm {
            NormKind::BatchNorm => Norm::BatchNorm(BnParams::new(spec.linear.out_channels())),
            NormKind::Scale => Norm::Scale(None),
        };
        Ok(Self { spec, weight, norm, version: 0 })
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    /// Mutable access to the master weights; invalidates outstanding caches.
    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        self.version += 1;
        &mut self.weight
    }

    pub fn set_weight(&mut self, weight: Tensor<T>) -> Result<()> {
        if weight.shape() != self.weight.shape() {
            return Err(Error::Dimension(format!("weight shape {:?} vs {:?}", weight.shape(), self.weight.shape())));
        }
        self.version += 1;
        self.weight = weight;
        Ok(())
    }

    pub fn bn(&self) -> Option<&BnParams<T>> {
        match &self.norm {
            Norm::BatchNorm(bn) => Some(bn),
            Norm::Scale(_) => None,
        }
    }

    pub fn bn_mut(&mut self) -> Option<&mut BnParams<T>> {
        self.version += 1;
        match &mut self.norm {
            Norm::BatchNorm(bn) => Some(bn),
            Norm::Scale(_) => None,
        }
    }

    pub fn alpha(&self) -> Option<ScaleFactor> {
        match self.norm {
            Norm::Scale(a) => a,
            Norm::BatchNorm(_) => None,
        }
    }

    pub fn set_alpha(&mut self, alpha: ScaleFactor) -> Result<()> {
        match &mut self.norm {
            Norm::Scale(a) => {
                *a = Some(alpha);
                self.version += 1;
                Ok(())
            }
            Norm::BatchNorm(_) => Err(Error::State(format!("block {} has batchnorm, not a scale", self.spec.index))),
        }
    }

    /// The same block in another scalar type. Grid-aligned weights are
    /// rebuilt from their codes, so they convert exactly.
    pub fn cast<U: Scalar>(&self) -> Result<Block<U>> {
        let weight = match self.spec.weight_bits {
            Some(bits) if self.weight == self.effective_weight()? => {
                let codes = quantize_weight_tensor(&self.weight, bits)?.0;
                dequantize_centered(&center_weight_codes(&codes)?)
            }
            _ => self.weight.cast(),
        };
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect::<Vec<U>>();
        let norm = match &self.norm {
            Norm::BatchNorm(bn) => Norm::BatchNorm(BnParams {
                gamma: conv(&bn.gamma),
                beta: conv(&bn.beta),
                running_mean: conv(&bn.running_mean),
                running_var: conv(&bn.running_var),
                epsilon: U::from_f64(bn.epsilon.to_f64()),
                momentum: U::from_f64(bn.momentum.to_f64()),
            }),
            Norm::Scale(a) => Norm::Scale(*a),
        };
        Ok(Block { spec: self.spec.clone(), weight, norm, version: 0 })
    }

    /// Weight codes, when the block quantizes its weights.
    pub fn weight_codes(&self) -> Result<Option<IntTensor<u8>>> {
        match self.spec.weight_bits {
            Some(bits) => Ok(Some(quantize_weight_tensor(&self.weight, bits)?.0)),
            None => Ok(None),
        }
    }

    /// Weights used in the forward pass: the dequantized grid values, or
    /// the raw weights for unquantized layers.
    pub fn effective_weight(&self) -> Result<Tensor<T>> {
        match self.spec.weight_bits {
            Some(bits) => Ok(quantize_weight_tensor(&self.weight, bits)?.1),
            None => Ok(self.weight.clone()),
        }
    }

    /// Replace the master weights by their quantized values.
    pub fn snap_to_grid(&mut self) -> Result<()> {
        let w = self.effective_weight()?;
        self.set_weight(w)
    }

    fn batch_shape(&self, per_sample: &[usize], n: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend_from_slice(per_sample);
        s
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != self.spec.input_shape.len() + 1 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::Dimension(format!(
                "block {} expects per-sample input {:?}, got batch {:?}",
                self.spec.index,
                self.spec.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    fn apply_linear(&self, w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self.spec.linear {
            Linear::Conv { stride, padding, .. } => conv2d(x, w, stride, padding),
            Linear::Dense { .. } => dense(x, w),
        }
    }

    /// Linear output with the forward weights, before normalization.
    pub fn pre_norm(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.apply_linear(&self.effective_weight()?, x)
    }

    fn normalize_eval(&self, pre: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.norm {
            Norm::BatchNorm(bn) => {
                let (scale, shift) = bn.eval_affine()?;
                let (n, c, inner) = channel_layout(pre.shape());
                let mut out = pre.clone();
                let d = out.data_mut();
                for s in 0..n {
                    for ch in 0..c {
                        for v in &mut d[(s * c + ch) * inner..(s * c + ch + 1) * inner] {
                            *v = *v * scale[ch] + shift[ch];
                        }
                    }
                }
                Ok(out)
            }
            Norm::Scale(Some(alpha)) => {
                let a = T::from_i64(alpha.get() as i64);
                Ok(pre.map(|v| a * v))
            }
            Norm::Scale(None) => Err(Error::State(format!("block {} scale factor is unset", self.spec.index))),
        }
    }

    fn normalize_train(&mut self, pre: &Tensor<T>) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
        let Norm::BatchNorm(bn) = &mut self.norm else {
            return Ok((self.normalize_eval(pre)?, None));
        };
        let (n, c, inner) = channel_layout(pre.shape());
        let m = n * inner;
        if m < 2 {
            return Err(Error::Numeric("batchnorm needs at least two values per channel in train mode".into()));
        }
        let count = T::from_i64(m as i64);
        let d = pre.data();
        let mut out = vec![T::zero(); pre.len()];
        let mut x_hat = vec![T::zero(); pre.len()];
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let mut sum = T::zero();
            for s in 0..n {
                for &v in &d[(s * c + ch) * inner..(s * c + ch + 1) * inner] {
                    sum += v;
                }
            }
            let mean = sum / count;
            let mut sq = T::zero();
            for s in 0..n {
                for &v in &d[(s * c + ch) * inner..(s * c + ch + 1) * inner] {
                    sq += (v - mean) * (v - mean);
                }
            }
            let var = sq / count;
            let denom = var + bn.epsilon;
            if !(denom > T::zero()) || !denom.is_finite() {
                return Err(Error::Numeric(format!("batchnorm channel {ch} variance {var:?}")));
            }
            let is = T::one() / denom.sqrt();
            inv_std.push(is);
            for s in 0..n {
                let r = (s * c + ch) * inner..(s * c + ch + 1) * inner;
                for k in r {
                    let xh = (d[k] - mean) * is;
                    x_hat[k] = xh;
                    out[k] = bn.gamma[ch] * xh + bn.beta[ch];
                }
            }
            let keep = bn.momentum;
            let unbiased = sq / T::from_i64(m as i64 - 1);
            bn.running_mean[ch] = keep * bn.running_mean[ch] + (T::one() - keep) * mean;
            bn.running_var[ch] = keep * bn.running_var[ch] + (T::one() - keep) * unbiased;
        }
        self.version += 1;
        Ok((Tensor::new(pre.shape().to_vec(), out)?, Some(BnCache { x_hat, inv_std })))
    }

    fn activate(&self, post: &Tensor<T>) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
        let mut y = match self.spec.activation {
            Activation::Identity => post.clone(),
            Activation::Clip => post.map(|v| v.clamp_to(T::zero(), T::one())),
            Activation::Quantized(bits) => {
                fake_quantize_activation(&post.map(|v| v.clamp_to(T::zero(), T::one())), bits)?
            }
        };
        let mut argmax = None;
        if let Some(size) = self.spec.pool {
            let (pooled, idx) = maxpool2d(&y, size)?;
            y = pooled;
            argmax = Some(idx);
        }
        if self.spec.flatten {
            let n = y.batch();
            let rest = y.len() / n;
            y = y.reshape(vec![n, rest])?;
        }
        Ok((y, argmax))
    }

    /// Eval-mode forward; never mutates the block.
    pub fn forward(&self, x: &Tensor<T>) -> Result<BlockOutput<T>> {
        let pre = self.pre_norm(x)?;
        let post_norm = self.normalize_eval(&pre)?;
        let (output, _) = self.activate(&post_norm)?;
        Ok(BlockOutput { post_norm, output })
    }

    /// Forward with caching for backpropagation. Batchnorm uses batch
    /// statistics and updates its running estimates.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(BlockOutput<T>, BlockCache<T>)> {
        self.check_input(x)?;
        let effective_weight = self.effective_weight()?;
        let pre = self.apply_linear(&effective_weight, x)?;
        let (post_norm, bn) = self.normalize_train(&pre)?;
        let (output, pool_argmax) = self.activate(&post_norm)?;
        let cache = BlockCache {
            version: self.version,
            input: x.clone(),
            effective_weight,
            bn,
            pre_pool_shape: post_norm.shape().to_vec(),
            post_norm: post_norm.clone(),
            pool_argmax,
        };
        Ok((BlockOutput { post_norm, output }, cache))
    }

    /// Backpropagate `grad_out` (w.r.t. the block output) through the block.
    pub fn backward(&self, grad_out: &Tensor<T>, cache: &BlockCache<T>) -> Result<BlockGrads<T>> {
        if cache.version != self.version {
            return Err(Error::State(format!("block {} cache is stale", self.spec.index)));
        }
        let n = cache.input.batch();
        let mut g = grad_out.clone();
        if self.spec.flatten || self.spec.pool.is_some() {
            let pooled_shape = match self.spec.pool {
                Some(size) => {
                    let s = &cache.pre_pool_shape;
                    vec![s[0], s[1], s[2] / size, s[3] / size]
                }
                None => cache.pre_pool_shape.clone(),
            };
            g = g.reshape(pooled_shape)?;
        }
        if let Some(idx) = &cache.pool_argmax {
            g = maxpool2d_backward(&g, idx, &cache.pre_pool_shape)?;
        }
        // clip and the activation quantizer pass gradient strictly inside (0, 1)
        if self.spec.activation != Activation::Identity {
            g = g.zip_map(&cache.post_norm, |gv, x| if x > T::zero() && x < T::one() { gv } else { T::zero() })?;
        }
        let (mut gamma_grad, mut beta_grad) = (None, None);
        let g_pre = match (&self.norm, &cache.bn) {
            (Norm::BatchNorm(bn), Some(bc)) => {
                let (nb, c, inner) = channel_layout(g.shape());
                let m = T::from_i64((nb * inner) as i64);
                let gd = g.data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
                    for s in 0..nb {
                        for k in (s * c + ch) * inner..(s * c + ch + 1) * inner {
                            sum_dy += gd[k];
                            sum_dy_xh += gd[k] * bc.x_hat[k];
                        }
                    }
                    dgamma[ch] = sum_dy_xh;
                    dbeta[ch] = sum_dy;
                    let coeff = bn.gamma[ch] * bc.inv_std[ch] / m;
                    for s in 0..nb {
                        for k in (s * c + ch) * inner..(s * c + ch + 1) * inner {
                            dx[k] = coeff * (m * gd[k] - sum_dy - bc.x_hat[k] * sum_dy_xh);
                        }
                    }
                }
                gamma_grad = Some(dgamma);
                beta_grad = Some(dbeta);
                Tensor::new(g.shape().to_vec(), dx)?
            }
            (Norm::BatchNorm(_), None) => {
                return Err(Error::State(format!("block {} cache lacks batchnorm state", self.spec.index)))
            }
            (Norm::Scale(Some(alpha)), _) => {
                let a = T::from_i64(alpha.get() as i64);
                g.map(|v| a * v)
            }
            (Norm::Scale(None), _) => {
                return Err(Error::State(format!("block {} scale factor is unset", self.spec.index)))
            }
        };
        let linear_out_shape = self.batch_shape(&self.spec.linear_shape, n);
        let g_pre = g_pre.reshape(linear_out_shape)?;
        let (dw, dx) = match self.spec.linear {
            Linear::Conv { stride, padding, .. } => (
                conv2d_grad_weight(&cache.input, &g_pre, cache.effective_weight.shape(), stride, padding)?,
                conv2d_grad_input(&cache.effective_weight, &g_pre, cache.input.shape(), stride, padding)?,
            ),
            Linear::Dense { .. } => (
                dense_grad_weight(&cache.input, &g_pre)?,
                dense_grad_input(&cache.effective_weight, &g_pre)?,
            ),
        };
        let weight = self.mask_weight_grad(dw)?;
        Ok(BlockGrads { weight, input: dx, gamma: gamma_grad, beta: beta_grad })
    }

    fn mask_weight_grad(&self, dw: Tensor<T>) -> Result<Tensor<T>> {
        if self.spec.weight_bits.is_some() {
            dw.zip_map(&self.weight, |gv, w| if w > -T::one() && w < T::one() { gv } else { T::zero() })
        } else {
            Ok(dw)
        }
    }

    /// Master-weight gradient of a loss whose gradient w.r.t. the linear
    /// output [`Block::pre_norm`] is `grad_pre`.
    pub fn linear_weight_grad(&self, x: &Tensor<T>, grad_pre: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let dw = match self.spec.linear {
            Linear::Conv { stride, padding, .. } => {
                conv2d_grad_weight(x, grad_pre, self.weight.shape(), stride, padding)?
            }
            Linear::Dense { .. } => dense_grad_weight(x, grad_pre)?,
        };
        self.mask_weight_grad(dw)
    }
}
