//! Quantization-aware training for small convolutional networks.
//!
//! Clipping thresholds are parameterized as `alpha * sigma`, where `sigma` is
//! estimated from the tensor being quantized (a running estimate for
//! activations, a direct estimate for weights) and `alpha` is trained by
//! gradient descent. Two quantizer families share that threshold: a uniform
//! quantizer with `2^b - 1` levels and a base-2 logarithmic quantizer whose
//! nonzero levels are powers of two, which makes integer inference a matter
//! of shifts and adds.
//!
//! The crate also ships the surrounding machinery: a small f64 tensor engine
//! with hand-written forward/backward kernels, a training loop with
//! progressive bit-width transfer and two-phase retraining, dataset loading
//! (IDX files plus seeded synthetic generators), byte-stable checkpoints, and
//! an exporter that folds batchnorm into fixed-point requantization constants
//! and runs the quantized layers in pure integer arithmetic.

pub mod batchnorm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod infer;
pub mod layers;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod quant;
pub mod quant_log2;
pub mod rng;
pub(crate) mod serial;
pub mod stats;
pub mod train;
pub mod tensor;

pub use quant::{QuantMode, QuantOutput, QuantizerState};
pub use rng::Rng;
pub use tensor::Tensor;
