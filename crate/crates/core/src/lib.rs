//! Online skeleton-based action recognition.
//!
//! A causally masked graph-attention encoder turns a growing skeleton stream
//! into per-frame latent states; a learned vector field extrapolates each
//! latent a few frames into the future with a fixed-step ODE solver; the
//! extrapolated trajectory feeds a classification head (and, during
//! training, a motion-prediction head).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod layers;
pub mod losses;
pub mod model;
pub mod ode;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
