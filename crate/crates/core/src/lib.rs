//! Desk-scale sequence-to-sequence pre-training with future n-gram prediction.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]), attention kernels including the n-stream masks
//! ([`attention`]), the encoder-decoder model and its training objective
//! ([`model`]), span-mask denoising data ([`denoise`]), an Adam trainer with
//! checkpoints ([`train`], [`checkpoint`]), greedy and beam decoding
//! ([`decode`]), and evaluation metrics ([`metrics`]).

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod decode;
pub mod denoise;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use autodiff::{Reduction, Tape, Var};
pub use error::{Error, Result};
pub use model::{alpha_weights, AlphaWeights, Model, ModelConfig, ModelParams, TokenId};
pub use tensor::Tensor;
