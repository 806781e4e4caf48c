//! Soft uniform 1xN block pruning (SUBP).
//!
//! Trains small CNNs from scratch while pruning and regrowing 1xN weight blocks
//! so that every group of `N` output channels keeps the same number of blocks,
//! exports the result in a Block Sparse Row layout and runs it with a
//! multithreaded kernel whose per-thread work is balanced by construction.
//!
//! All numeric code is generic over [`Scalar`] (`f32` and `f64`); the aliases
//! below fix the `f32` instantiation used for training and deployment.

pub mod bench;
pub mod bsr;
mod bytes;
pub mod controller;
pub mod conv;
pub mod criterion;
pub mod data;
pub mod error;
pub mod flops;
pub mod format;
pub mod infer;
pub mod loss;
pub mod mask;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use criterion::Criterion;
pub use error::{Error, Result};
pub use mask::{BlockMask, BlockPartition};
pub use scalar::Scalar;
pub use controller::{MaskState, SubpSchedule};

pub type Tensor = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ConvLayer = conv::ConvLayerParams<f32>;
pub type BlockVector = mask::BlockVector<f32>;
pub type ScoreMatrix = criterion::ScoreMatrix<f32>;
pub type Model = model::TinyNet<f32>;
pub type Model64 = model::TinyNet<f64>;
pub type BsrLayer = bsr::BsrLayer<f32>;
pub type BsrModel = bsr::BsrModel<f32>;
pub type RaggedBsrLayer = infer::RaggedBsrLayer<f32>;
pub type TrainOutput = train::TrainOutput<f32>;
