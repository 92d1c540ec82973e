//! Mixed-state quantum denoising diffusion.
//!
//! The forward process depolarizes an ensemble of density matrices toward the
//! maximally mixed state; the backward process is a chain of trainable
//! hardware-efficient circuits with measured ancillas, each trained to undo one
//! forward step under a superfidelity-based ensemble distance.

pub mod ansatz;
pub mod config;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod state;
pub mod tasks;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
