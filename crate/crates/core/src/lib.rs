//! Encoder-forecaster recurrent-convolutional nowcasting.
//!
//! The crate contains everything needed to train and evaluate the network
//! at desk scale: a small reverse-mode autodiff engine ([`tensor`]), the
//! network blocks ([`nn`]) and their assembly ([`model`]), the frame-archive
//! data pipeline ([`data`]), the per-variable losses and metrics
//! ([`metrics`]), and the training protocol ([`train`]).

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{EncoderForecaster, ModelConfig};
pub use tensor::{Float, Tensor};
