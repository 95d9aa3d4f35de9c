//! Labelled image datasets stored as 8-bit pixel codes.
//!
//! Readers cover the IDX format (MNIST family) and the CIFAR binary batch
//! format. Pixels stay integer codes; [`Dataset::batch`] maps them to
//! `[0, 1]` as `code / 255` at the input boundary.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{CodeKind, IntTensor, Tensor};

/// Bit-width of stored pixel codes.
pub const PIXEL_BITS: u8 = 8;

const IDX_LABELS: u32 = 0x0000_0801;
const IDX_IMAGES: u32 = 0x0000_0803;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: IntTensor<u8>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    /// `images` is `[N, C, H, W]` (or `[N, features]`) with 8-bit codes.
    pub fn new(images: IntTensor<u8>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.bits() != PIXEL_BITS || images.kind() != CodeKind::Unsigned {
            return Err(Error::Data("images must be unsigned 8-bit codes".into()));
        }
        if images.shape().len() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for image tensor {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::Data(format!("label {} at {i} outside {classes} classes", labels[i])));
        }
        Ok(Self { images, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn images(&self) -> &IntTensor<u8> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample image shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::new(self.images.slice_batch(0, n)?, self.labels[..n].to_vec(), self.classes, self.split)
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Self::new(self.images.gather_batch(rows)?, labels, self.classes, self.split)
    }

    /// Pixel codes of the given rows, reshaped to `[rows, shape...]`.
    pub fn codes(&self, rows: &[usize], shape: &[usize]) -> Result<IntTensor<u8>> {
        let mut full = vec![rows.len()];
        full.extend_from_slice(shape);
        self.images.gather_batch(rows)?.reshape(full)
    }

    /// Rows as reals in `[0, 1]`, reshaped to `[rows, shape...]`.
    pub fn batch<T: Scalar>(&self, rows: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
        let codes = self.codes(rows, shape)?;
        let max = (1i64 << PIXEL_BITS) - 1;
        let data = codes.data().iter().map(|&c| T::from_ratio(c as i64, max)).collect();
        Tensor::new(codes.shape().to_vec(), data)
    }

    pub fn batch_labels(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }

    /// Seed-deterministic permutation of all rows.
    pub fn shuffled(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut rows: Vec<usize> = (0..self.len()).collect();
        rows.shuffle(rng);
        rows
    }

    /// `count` batches of `batch` rows drawn without replacement from a
    /// seeded permutation.
    pub fn sample_batches(&self, seed: u64, count: usize, batch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = self.shuffled(&mut rng);
        rows.chunks(batch.max(1)).take(count).map(|c| c.to_vec()).collect()
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format { offset, reason: "truncated header".into() })
}

/// Parsed IDX file: dimensions and raw `u8` payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8], expect_magic: u32) -> Result<Idx> {
    let magic = be_u32(bytes, 0)?;
    if magic != expect_magic {
        return Err(Error::Format { offset: 0, reason: format!("bad magic {magic:#010x}, expected {expect_magic:#010x}") });
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims).map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let len: usize = dims.iter().product();
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() < len {
        return Err(Error::Format {
            offset: bytes.len(),
            reason: format!("truncated payload: {} of {len} bytes", payload.len()),
        });
    }
    if payload.len() > len {
        return Err(Error::Format { offset: start + len, reason: "trailing bytes".into() });
    }
    Ok(Idx { dims, data: payload.to_vec() })
}

pub fn encode_idx(idx: &Idx) -> Vec<u8> {
    let magic = 0x0000_0800 | idx.dims.len() as u32;
    let mut out = magic.to_be_bytes().to_vec();
    for &d in &idx.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&idx.data);
    out
}

/// Build a dataset from an IDX image file and an IDX label file.
pub fn dataset_from_idx(images: &[u8], labels: &[u8], classes: usize, split: Split) -> Result<Dataset> {
    let img = parse_idx(images, IDX_IMAGES)?;
    let lab = parse_idx(labels, IDX_LABELS)?;
    if img.dims.len() != 3 {
        return Err(Error::Format { offset: 3, reason: format!("images need 3 dimensions, got {}", img.dims.len()) });
    }
    if img.dims[0] != lab.dims[0] {
        return Err(Error::Data(format!("{} images but {} labels", img.dims[0], lab.dims[0])));
    }
    let shape = vec![img.dims[0], 1, img.dims[1], img.dims[2]];
    let images = IntTensor::new(shape, img.data, PIXEL_BITS, CodeKind::Unsigned)?;
    Dataset::new(images, lab.data.into_iter().map(usize::from).collect(), classes, split)
}

pub fn read_idx(images: &Path, labels: &Path, classes: usize, split: Split) -> Result<Dataset> {
    dataset_from_idx(&fs::read(images)?, &fs::read(labels)?, classes, split)
}

/// Encode a single-channel dataset as `(images, labels)` IDX files.
pub fn dataset_to_idx(data: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let &[n, 1, h, w] = data.images.shape() else {
        return Err(Error::Data(format!("IDX needs [N, 1, H, W] images, got {:?}", data.images.shape())));
    };
    let labels = data
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Data(format!("label {l} exceeds a byte"))))
        .collect::<Result<Vec<_>>>()?;
    let images = Idx { dims: vec![n, h, w], data: data.images.data().to_vec() };
    let labels = Idx { dims: vec![n], data: labels };
    Ok((encode_idx(&images), encode_idx(&labels)))
}

/// Parse CIFAR-10 binary batches: records of one label byte and 3x32x32 pixels.
pub fn dataset_from_cifar(batches: &[Vec<u8>], split: Split) -> Result<Dataset> {
    const RECORD: usize = 1 + 3 * 32 * 32;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for bytes in batches {
        if bytes.len() % RECORD != 0 {
            return Err(Error::Format {
                offset: bytes.len() - bytes.len() % RECORD,
                reason: "truncated CIFAR record".into(),
            });
        }
        for rec in bytes.chunks(RECORD) {
            labels.push(rec[0] as usize);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    let images = IntTensor::new(vec![labels.len(), 3, 32, 32], pixels, PIXEL_BITS, CodeKind::Unsigned)?;
    Dataset::new(images, labels, 10, split)
}

pub fn read_cifar(paths: &[&Path], split: Split) -> Result<Dataset> {
    let batches = paths.iter().map(fs::read).collect::<std::io::Result<Vec<_>>>()?;
    dataset_from_cifar(&batches, split)
}
