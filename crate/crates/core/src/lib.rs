//! Event recognition for distributed acoustic sensing.
//!
//! Raw multi-channel fiber recordings are turned into stacked per-channel
//! log-magnitude spectrograms ([`stft`]), classified by a four-stage CNN with
//! channel attention ([`model`]), and trained with a joint cross-entropy and
//! triplet objective ([`loss`], [`train`]) on top of a small reverse-mode
//! autodiff engine ([`autograd`]).

pub mod autograd;
pub mod data;
mod error;
pub mod fft;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod stft;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Float, Tensor};
