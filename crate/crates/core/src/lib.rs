//! Dual-memory network for online video segmentation.
//!
//! A frame passes through a small convolutional encoder, a local aggregator
//! over the last few frames (bottleneck LSTM plus self-attention), a
//! cross-frame read of a gated global memory, and a mask decoder. Everything
//! runs on a tape-based autodiff engine generic over `f32` and `f64`.

pub mod bench;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod memory;
pub mod model;
pub mod scalar;
pub mod tensor;

pub use config::{Precision, RunConfig};
pub use error::{Error, Result};
pub use model::checkpoint::Checkpoint;
pub use model::train::{train, AdamW, EpochLog, TrainConfig};
pub use model::{DMNetConfig, LocalAggregator, Model, StreamState, Variant};
pub use scalar::Scalar;
pub use tensor::{FlopCounter, Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
