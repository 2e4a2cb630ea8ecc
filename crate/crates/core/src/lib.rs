//! Semi-supervised training for a Tacotron-style text-to-speech model.
//!
//! The crate contains everything needed to train and evaluate the model at
//! desk scale: a small reverse-mode differentiation engine, audio signal
//! processing, a text frontend, word-vector tooling, the network itself,
//! decoder pre-training and fine-tuning, MCD evaluation and an experiment
//! harness that drives all of it from JSON configuration.

pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod text;
pub mod training;
pub mod wordvec;

pub use error::{Error, Result};
