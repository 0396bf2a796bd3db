//! Detection of fully rhotic versus derhotic /r/ productions from audio.
//!
//! The pipeline runs in file-separated stages:
//!
//! 1. [`synth`] generates a labeled desk-scale corpus (or bring your own
//!    manifest in the same CSV schema);
//! 2. [`corpus`] derives binary labels from listener ratings, profiles
//!    speakers for stimulability, and builds down-sampled splits;
//! 3. [`tracking`] optimizes per-utterance formant ceilings and extracts
//!    robust Burg formant tracks ([`dsp`] holds the signal-processing
//!    primitives);
//! 4. [`features`] turns tracks (or MFCC frames) into normalized
//!    10-bin statistic tensors;
//! 5. [`models`] trains gated-recurrent, convolutional, and shallow
//!    classifiers with early stopping and decision-threshold search;
//! 6. [`tuning`] runs seeded random hyperparameter search and per-speaker
//!    personalization;
//! 7. [`eval`] reports participant-specific F1, participant-weighted
//!    confusion matrices, and age/sex strata tables.
//!
//! The `examples/` directory has one runnable program per stage; the
//! `rhotic` binary wires the same stages into batch subcommands.

pub mod cli;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod features;
pub mod models;
pub mod pipeline;
pub mod synth;
pub mod tracking;
pub mod tuning;
pub mod util;

pub use error::{Error, Result};

/// Tool version embedded in every output artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
