//! Interpretable spatiotemporal precipitation forecasting.
//!
//! A time-distributed convolutional feature extractor feeds a ConvLSTM
//! whose final hidden state is pooled and mapped to next-day area-averaged
//! precipitation. The crate covers the full path from gridded daily
//! variables to trained models and four post-hoc explanation methods:
//! permutation importance, Grad-CAM, temporal occlusion and counterfactual
//! perturbation.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod hyperopt;
pub mod nn;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod xai;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use nn::{Model, ModelConfig, Regressor};
pub use tensor::Tensor;
