//! Acoustic analysis: audio handling, framing, Burg LPC with robust
//! refinement, formant conversion, and MFCC extraction.
//!
//! Everything here is a pure function of its inputs and safe to call from
//! worker threads on disjoint utterances.

pub mod audio;
pub mod formants;
pub mod lpc;
pub mod mfcc;
pub mod window;

pub use audio::{extract_interval, preemphasize, resample, AudioClip};
pub use formants::{lpc_to_formants, polynomial_roots, FormantFrame};
pub use lpc::{burg_lpc, robust_refine, LpcModel, FORMANT_LPC_ORDER};
pub use mfcc::{MfccExtractor, MfccFrame, N_MFCC};
pub use window::{frames, gaussian_window, AnalysisFrame, FRAME_STEP, WINDOW_DURATION};

/// Pre-emphasis cutoff used throughout the pipeline, Hz.
pub const PREEMPHASIS_CUTOFF: f64 = 50.0;

/// Interval buffer added on each side of a rhotic interval, seconds.
pub const INTERVAL_BUFFER: f64 = 0.010;
