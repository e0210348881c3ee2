//! Diffusion-based adversarial domain adaptation for cross-user human
//! activity recognition, plus Wasserstein/bootstrap distribution-shift
//! analysis.
//!
//! Pipeline: [`datapipe`] turns sensor CSVs into feature vectors,
//! [`condnoise`] and [`diffusion`] build class-conditioned noisy samples,
//! [`noisepred`] denoises and classifies them, [`trainer`] runs the
//! adversarial objective, and [`distshift`] measures cross-user shift.

pub mod checkpoint;
pub mod cli;
pub mod condnoise;
pub mod datapipe;
pub mod diffusion;
pub mod distshift;
pub mod error;
pub mod nn;
pub mod noisepred;
pub mod trainer;

pub use error::{Error, Result};
