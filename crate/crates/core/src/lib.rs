//! Frequency-domain defense for image super-resolution.
//!
//! The crate provides:
//! - an orthonormal 2D DCT ([`dct`]) and the random spectral mask built on it ([`mask`]),
//! - a spectral adversarial-sample classifier ([`classifier`]),
//! - a tiny reverse-mode differentiation engine ([`autodiff`]),
//! - a miniature stacked-hourglass SR network with mask sites ([`backbone`]),
//! - the iterative gradient-sign attack ([`attack`]), PSNR/SSIM ([`metrics`]),
//! - the three-stage adversarial training pipeline ([`training`]),
//! - and the experiment harness used by the CLI ([`experiment`]).

pub mod attack;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod classifier;
pub mod dct;
pub mod error;
pub mod experiment;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{Shape, Tensor};
