//! Multi-rate VAEs at desk scale.
//!
//! A single gated hypernetwork learns the whole rate-distortion curve of a
//! VAE in one training run: every layer's pre-activations are scaled by an
//! activation of an affine function of log(beta). The `analytic` module holds
//! the exact linear-VAE response functions used as ground truth, `eval`
//! verifies the constructive exactness result and runs rate-distortion
//! sweeps, and `io` + the companion CLI crate tie the experiments together.

pub mod analytic;
pub mod error;
pub mod eval;
pub mod gate;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
