//! Sequential quantized networks: the BatchNorm teacher and its BN-free student.

mod block;
mod spec;

pub use block::{BlockCache, BlockGrads, BlockOutput, Block, BnParams, Mode, Norm, BN_EPSILON, BN_MOMENTUM};
pub use spec::{check_duality, Activation, BlockSpec, LayerKind, LayerSpec, Linear, NetworkSpec, NormKind};

use rand::Rng;

use crate::error::{Error, Result};
use crate::quant::ScaleFactor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn he_uniform<T: Scalar>(spec: &BlockSpec, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / spec.linear.fan_in() as f64).sqrt();
    Tensor::from_fn(spec.linear.weight_shape(), |_| T::from_f64(rng.gen_range(-bound..bound)))
}

fn run_blocks<T: Scalar>(blocks: &[Block<T>], x: &Tensor<T>, upto: usize) -> Result<Vec<BlockOutput<T>>> {
    let mut acts: Vec<BlockOutput<T>> = Vec::with_capacity(upto + 1);
    for block in &blocks[..=upto] {
        let input = acts.last().map(|a| &a.output).unwrap_or(x);
        acts.push(block.forward(input)?);
    }
    Ok(acts)
}

/// BatchNorm-enabled quantized network.
#[derive(Debug, Clone)]
pub struct TeacherNet<T> {
    spec: NetworkSpec,
    pub blocks: Vec<Block<T>>,
}

impl<T: Scalar> TeacherNet<T> {
    /// Fresh network with uniform fan-in scaled weights and default BN state.
    pub fn init(spec: NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        let blocks = spec
            .blocks()?
            .into_iter()
            .map(|b| {
                let w = he_uniform(&b, rng);
                Block::new(b, w)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(spec, blocks)
    }

    pub fn from_blocks(spec: NetworkSpec, blocks: Vec<Block<T>>) -> Result<Self> {
        if spec.norm_kind()? != NormKind::BatchNorm {
            return Err(Error::Config("teacher network must use batchnorm".into()));
        }
        if blocks.iter().map(|b| &b.spec).ne(spec.blocks()?.iter()) {
            return Err(Error::Config("teacher blocks do not match the network spec".into()));
        }
        Ok(Self { spec, blocks })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Eval-mode forward returning logits and every block's activations.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<BlockOutput<T>>)> {
        let acts = run_blocks(&self.blocks, x, self.blocks.len() - 1)?;
        Ok((acts.last().expect("non-empty").output.clone(), acts))
    }

    /// Eval-mode forward through blocks `0..=upto`.
    pub fn forward_eval_upto(&self, x: &Tensor<T>, upto: usize) -> Result<Vec<BlockOutput<T>>> {
        if upto >= self.blocks.len() {
            return Err(Error::Config(format!("block {upto} past depth {}", self.blocks.len())));
        }
        run_blocks(&self.blocks, x, upto)
    }

    /// Train-mode forward with batch statistics; returns caches for backward.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<BlockOutput<T>>, Vec<BlockCache<T>>)> {
        let mut acts: Vec<BlockOutput<T>> = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let input = acts.last().map(|a| &a.output).unwrap_or(x);
            let (out, cache) = block.forward_train(input)?;
            acts.push(out);
            caches.push(cache);
        }
        Ok((acts.last().expect("non-empty").output.clone(), acts, caches))
    }

    pub fn cast<U: Scalar>(&self) -> Result<TeacherNet<U>> {
        let blocks = self.blocks.iter().map(|b| b.cast()).collect::<Result<Vec<_>>>()?;
        TeacherNet::from_blocks(self.spec.clone(), blocks)
    }

    /// Replace all master weights by their grid values.
    pub fn snap_to_grid(&mut self) -> Result<()> {
        self.blocks.iter_mut().try_for_each(|b| b.snap_to_grid())
    }
}

/// Teacher forward in either mode. In train mode batchnorm uses batch
/// statistics and updates its running estimates.
pub fn forward_teacher<T: Scalar>(
    net: &mut TeacherNet<T>,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Vec<BlockOutput<T>>)> {
    match mode {
        Mode::Eval => net.forward_eval(x),
        Mode::Train => net.forward_train(x).map(|(l, a, _)| (l, a)),
    }
}

/// BN-free student: each normalization is a fixed positive integer scale.
#[derive(Debug, Clone)]
pub struct StudentNet<T> {
    spec: NetworkSpec,
    pub blocks: Vec<Block<T>>,
    frozen: Vec<bool>,
}

impl<T: Scalar> StudentNet<T> {
    /// Student twin of a teacher, starting from the teacher's quantized weights.
    pub fn from_teacher(teacher: &TeacherNet<T>) -> Result<Self> {
        let spec = teacher.spec.to_student();
        let blocks = spec
            .blocks()?
            .into_iter()
            .zip(&teacher.blocks)
            .map(|(b, tb)| Block::new(b, tb.effective_weight()?))
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(spec, blocks)
    }

    pub fn from_blocks(spec: NetworkSpec, blocks: Vec<Block<T>>) -> Result<Self> {
        if spec.norm_kind()? != NormKind::Scale {
            return Err(Error::Config("student network must use scale layers".into()));
        }
        if blocks.iter().map(|b| &b.spec).ne(spec.blocks()?.iter()) {
            return Err(Error::Config("student blocks do not match the network spec".into()));
        }
        let frozen = vec![false; blocks.len()];
        Ok(Self { spec, blocks, frozen })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// The same student in another scalar type, frozen state included.
    pub fn cast<U: Scalar>(&self) -> Result<StudentNet<U>> {
        let blocks = self.blocks.iter().map(|b| b.cast()).collect::<Result<Vec<_>>>()?;
        let mut s = StudentNet::from_blocks(self.spec.clone(), blocks)?;
        s.frozen = self.frozen.clone();
        Ok(s)
    }

    pub fn alphas(&self) -> Vec<Option<ScaleFactor>> {
        self.blocks.iter().map(|b| b.alpha()).collect()
    }

    pub fn is_frozen(&self, block: usize) -> bool {
        self.frozen[block]
    }

    pub fn is_fully_frozen(&self) -> bool {
        self.frozen.iter().all(|&f| f)
    }

    /// Snap the block's weights to the grid and freeze it.
    pub fn freeze(&mut self, block: usize) -> Result<()> {
        let b = &mut self.blocks[block];
        if b.alpha().is_none() {
            return Err(Error::State(format!("block {block} frozen without a scale factor")));
        }
        b.snap_to_grid()?;
        self.frozen[block] = true;
        Ok(())
    }

    pub fn freeze_all(&mut self) -> Result<()> {
        (0..self.blocks.len()).try_for_each(|i| self.freeze(i))
    }

    /// CRC-32 over the forward weights and scale factors of blocks `0..end`.
    pub fn checksum(&self, end: usize) -> Result<u32> {
        let mut h = crc32fast::Hasher::new();
        for b in &self.blocks[..end] {
            for v in b.effective_weight()?.data() {
                h.update(&v.to_f64().to_le_bytes());
            }
            h.update(&b.alpha().map_or(0, |a| a.get()).to_le_bytes());
        }
        Ok(h.finalize())
    }

    /// Forward through blocks `0..=upto` (all blocks when `None`). Returns the
    /// last computed block output and every block's activations.
    pub fn forward(&self, x: &Tensor<T>, upto: Option<usize>) -> Result<(Tensor<T>, Vec<BlockOutput<T>>)> {
        let last = upto.unwrap_or(self.blocks.len() - 1);
        if last >= self.blocks.len() {
            return Err(Error::Config(format!("block {last} past depth {}", self.blocks.len())));
        }
        if let Some(i) = (0..=last).find(|&i| self.blocks[i].alpha().is_none()) {
            return Err(Error::State(format!("student block {i} has no scale factor")));
        }
        let acts = run_blocks(&self.blocks, x, last)?;
        Ok((acts.last().expect("non-empty").output.clone(), acts))
    }
}

pub fn forward_student<T: Scalar>(
    net: &StudentNet<T>,
    x: &Tensor<T>,
    upto: Option<usize>,
) -> Result<(Tensor<T>, Vec<BlockOutput<T>>)> {
    net.forward(x, upto)
}

#[cfg(test)]
mod tests;
