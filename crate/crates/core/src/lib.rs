//! Zero-reference illumination restoration toolkit.
//!
//! Two-stage pipeline: spatially adaptive gamma correction of the Retinex
//! illumination map, then diffusion-based reconstruction that treats the
//! corrected image as an intermediate noisy state. Trains on degraded images
//! only; a corpus-level illumination histogram prior regularizes exposure.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod histprior;
pub mod imaging;
pub mod nets;
pub mod retinex;

pub use error::{Error, Result};
pub use imaging::{ImageTensor, PatchSpec};
pub use retinex::RetinexPair;
