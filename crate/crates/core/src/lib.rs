//! Attribute-conditioned diffusion on synthetic point clouds, with complex
//! preference optimization against dynamic winner/loser noise targets.

pub mod cpo;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod rng;
pub mod selfcheck;
pub mod taxonomy;
pub mod train_sft;

pub use error::{Error, Result};
