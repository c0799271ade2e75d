//! Omnimodal dataset distillation through a spectral rank-1 proxy of each instance's
//! cross-modal Gram matrix, trained by trajectory matching against expert runs.

pub mod binio;
pub mod buffer;
pub mod datagen;
pub mod distill;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod scalar;
pub mod spectral;
pub mod theory;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use scalar::{Dual, Real};
