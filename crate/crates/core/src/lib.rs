//! Guided thermal super-resolution with attribute-disentangled optical
//! guidance.
//!
//! The crate is organized bottom-up: [`numcore`] provides tensors and
//! reverse-mode autodiff, [`imaging`] the degradation pipeline and image
//! files, [`layers`] the windowed attention layers, [`model`] the full
//! network, [`train`] the staged optimizer loop and checkpoints, and
//! [`eval`] the quality metrics.

pub mod error;
pub mod eval;
pub mod imaging;
pub mod layers;
pub mod model;
pub mod numcore;
pub mod train;

pub use error::{Error, Result};
pub use numcore::{AutodiffTape, ParamId, ParamStore, Parameter, Scalar, SeededRng, Tensor};
