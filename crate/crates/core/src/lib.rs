//! Training denoisers from unpaired noisy measurements and noise samples.
//!
//! The denoiser is fitted adversarially against two Wasserstein critics: one
//! compares re-noised outputs with real measurements, the other compares the
//! removed residual with real noise. See the crate README for an overview.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod rawio;
pub mod recon;
pub mod rng;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{backward, no_grad, Array, Tape, Tensor};
