//! Dense real and integer tensors in row-major layout.
//!
//! Images are NCHW and convolution kernels OIHW throughout the crate.

mod int_ops;
mod ops;

pub use int_ops::{int_conv2d, int_matmul, max_abs_bound};
pub use ops::{
    conv2d, conv2d_grad_input, conv2d_grad_weight, conv_output_size, dense, dense_grad_input,
    dense_grad_weight, matmul, maxpool2d, maxpool2d_backward,
};

use num_traits::PrimInt;

use crate::error::{dim, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(dim(format!("shape {shape:?} has a zero dimension")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(dim(format!("shape {shape:?} needs {n} values, got {len}")));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: (0..n).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape, self.data.len())?;
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim(format!("shape {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `[start, start + count)` of the leading dimension.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        let per: usize = self.shape[1..].iter().product();
        if start + count > self.shape[0] {
            return Err(dim(format!("batch slice {start}+{count} past {}", self.shape[0])));
        }
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Self { shape, data: self.data[start * per..(start + count) * per].to_vec() })
    }

    /// Concatenate along the leading dimension.
    pub fn concat_batch(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| dim("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(dim(format!("concat shape {:?} vs {:?}", p.shape, first.shape)));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }

    pub fn sum_sq_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(dim(format!("shape {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| {
            let d = a - b;
            acc + d * d
        }))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(dim(format!("shape {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max_of((a - b).abs())))
    }
}

/// What an [`IntTensor`]'s values mean, which fixes their admissible range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeKind {
    /// Activation codes in `[0, 2^bits - 1]`.
    Unsigned,
    /// Weight codes stored centered and doubled: `2c - (2^bits - 1)`, an
    /// integer of the same parity as `2^bits - 1` in `[-(2^bits - 1), 2^bits - 1]`.
    Centered,
    /// Wide accumulators; exempt from the bit-width range check.
    Accumulator,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor<I> {
    shape: Vec<usize>,
    data: Vec<I>,
    bits: u8,
    kind: CodeKind,
}

pub(crate) fn code_max(bits: u8) -> i64 {
    (1i64 << bits) - 1
}

impl<I: PrimInt + Into<i64>> IntTensor<I> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<I>, bits: u8, kind: CodeKind) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape, data.len())?;
        if !(1..=62).contains(&bits) {
            return Err(Error::Config(format!("bit-width {bits} unsupported")));
        }
        let t = Self { shape, data, bits, kind };
        t.validate()?;
        Ok(t)
    }

    pub fn accumulator(shape: impl Into<Vec<usize>>, data: Vec<I>) -> Result<Self> {
        Self::new(shape, data, 62, CodeKind::Accumulator)
    }

    fn validate(&self) -> Result<()> {
        let max = code_max(self.bits);
        let ok = |v: i64| match self.kind {
            CodeKind::Unsigned => (0..=max).contains(&v),
            CodeKind::Centered => v.abs() <= max && (v - max).rem_euclid(2) == 0,
            CodeKind::Accumulator => true,
        };
        match self.data.iter().position(|&v| !ok(v.into())) {
            None => Ok(()),
            Some(i) => Err(Error::Range(format!(
                "value {} at {i} outside {:?} {}-bit range",
                self.data[i].into(),
                self.kind,
                self.bits
            ))),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[I] {
        &self.data
    }

    pub fn into_data(self) -> Vec<I> {
        self.data
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn kind(&self) -> CodeKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Largest magnitude a value can take under the declared range.
    pub fn magnitude_bound(&self) -> u128 {
        match self.kind {
            CodeKind::Unsigned | CodeKind::Centered => code_max(self.bits) as u128,
            CodeKind::Accumulator => {
                self.data.iter().map(|&v| (v.into() as i128).unsigned_abs()).max().unwrap_or(0)
            }
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape, self.data.len())?;
        self.shape = shape;
        Ok(self)
    }

    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        let per: usize = self.shape[1..].iter().product();
        if start + count > self.shape[0] {
            return Err(dim(format!("batch slice {start}+{count} past {}", self.shape[0])));
        }
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Self {
            shape,
            data: self.data[start * per..(start + count) * per].to_vec(),
            bits: self.bits,
            kind: self.kind,
        })
    }

    /// Gather rows of the leading dimension in the given order.
    pub fn gather_batch(&self, rows: &[usize]) -> Result<Self> {
        let per: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(dim(format!("row {r} past {}", self.shape[0])));
            }
            data.extend_from_slice(&self.data[r * per..(r + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self { shape, data, bits: self.bits, kind: self.kind })
    }

    /// Integer values as an integer-valued real tensor.
    pub fn to_real<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_i64(v.into())).collect(),
        }
    }

    pub fn widen(&self) -> IntTensor<i64> {
        IntTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.into()).collect(),
            bits: self.bits,
            kind: self.kind,
        }
    }
}
