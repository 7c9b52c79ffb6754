//! Keyword spotting with ConvMixer networks.
//!
//! The pipeline runs from 16 kHz WAV clips through a log-mel front end,
//! optional noise and reverberation augmentation, a ConvMixer classifier
//! trained with a staged noise curriculum, and a per-condition evaluation.

pub mod audio;
pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod kv;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{KwsError, Result};
pub use kws_tensor as tensor;
