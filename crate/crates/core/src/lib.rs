//! Blind Poisson-Gaussian image denoising.
//!
//! The pipeline has two learned stages. A small U-Net estimates the noise
//! parameters `(alpha, sigma)` of a noisy image by driving the eigenvalue
//! noise estimate of its variance-stabilized version to one. A masked
//! convolution blind-spot network then predicts a per-pixel affine denoiser
//! in the stabilized domain, trained on noisy images alone with an unbiased
//! estimate of the mean-squared error.

pub mod autograd;
pub mod bsn;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod pge;
pub mod rng;
pub mod tensor;
pub mod var_est;
pub mod vst;

pub use autograd::{ParamStore, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use noise::{NoiseParams, SynthesisMode};
pub use tensor::Tensor;
