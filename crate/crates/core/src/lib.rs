//! Conditional sequence VAEs over face-animation coefficients.
//!
//! Two generators share one small autodiff engine:
//!
//! * [`gmeg`]: expression coefficients from audio and an emotion label, with a
//!   Gaussian-mixture latent space (one component per emotion) that supports
//!   sampling and interpolation between emotions.
//! * [`nfmg`]: head/eye/blink motion from audio, with a normalizing-flow prior
//!   built from affine coupling steps.
//!
//! [`synthdata`] produces corpora with known ground truth, and [`metrics`]
//! implements the diversity, beat, and interpolation-smoothness scores.

pub mod checkpoint;
mod codec;
pub mod config;
pub mod distributions;
pub mod error;
pub mod gmeg;
pub mod metrics;
pub mod nfmg;
pub mod nn;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
