//! One-step window-conditioned flow surrogate for 2D turbulence: tensor
//! autodiff, UNet denoiser, training objectives, autoregressive rollout, a
//! Kolmogorov-flow solver and evaluation metrics.

mod error;

pub mod backbone;
pub mod cli;
pub mod io;
pub mod metrics;
pub mod objectives;
pub mod rollout;
pub mod solver;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
