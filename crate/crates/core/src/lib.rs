//! Low-bit post-training weight quantization with low-rank residual
//! convolutional adapters.
//!
//! The quantization residual `ΔW = W − deq(⟦W⟧)` of every conv layer is
//! factorized by SVD into a two-filter adapter `B ⊛ A` that runs next to the
//! quantized layer. Per-layer adapter ranks are chosen by a differentiable
//! search: a Butterworth mask relaxes the hard rank cut-off, and Adam
//! minimizes the calibration loss under a parameter budget.
//!
//! Every numeric routine is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, the precision used for SVD and
//! search.

pub mod adapter;
pub mod convnet;
pub mod error;
pub mod io;
pub mod quant;
pub mod scalar;
pub mod search;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::DenseTensor<f64>;
pub type Matrix = tensor::Matrix<f64>;
pub type Model = convnet::Model<f64>;
pub type Dataset = convnet::Dataset<f64>;
pub type AdaptedQuantModel = convnet::AdaptedQuantModel<f64>;
pub type QuantizedTensor = quant::QuantizedTensor<f64>;
pub type ResidualFactorization = adapter::ResidualFactorization<f64>;
pub type LowRankAdapter = adapter::LowRankAdapter<f64>;
pub type RankVector = search::RankVector<f64>;
pub type SearchOutcome = search::SearchOutcome<f64>;
