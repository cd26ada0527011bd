//! Forced-alignment toolkit: corpus ingestion, lexicon compilation, audio
//! augmentation, acoustic features, staged HMM-GMM training, boundary
//! evaluation and grid sweeps.

pub mod am;
pub mod audio;
pub mod augment;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod lexicon;
pub mod sweep;
pub mod synth;
pub mod textgrid;

pub use error::{Error, Result};
