//! BatchNorm-free fully integer quantized networks.
//!
//! A BatchNorm-enabled quantized teacher is distilled layer by layer into a
//! student that replaces every normalization with a fixed integer scale, and
//! the student is exported to a model that runs with integer arithmetic only.

mod bytes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod network;
pub mod quant;
pub mod runtime;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Exact, Real, Scalar};
pub use tensor::{CodeKind, IntTensor, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ExactTensor = Tensor<Exact>;

/// Size the global worker pool used by batched evaluation. Call once,
/// before any parallel work.
pub fn init_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))
}
