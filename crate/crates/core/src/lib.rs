//! STFT-domain neural audio codec.
//!
//! Audio is analysed into log-magnitude, phase and temporal phase-gradient
//! streams, encoded by a dual-branch network into a 1/8-rate latent,
//! discretised by a residual vector quantizer and decoded back to magnitude
//! and phase for inverse-STFT synthesis.

mod error;

pub mod audio;
pub mod bitstream;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod discriminators;
pub mod generator;
pub mod losses;
pub mod mel;
pub mod metrics;
pub mod nn;
pub mod quantizer;
pub mod stft;
pub mod train;

pub use error::{Error, Result};
