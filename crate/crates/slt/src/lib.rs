//! slt — a desk-scale end-to-end speech translation toolkit.
//!
//! Covers the full pipeline: MFCC acoustic features, text normalization and
//! subword segmentation, attention encoder-decoder models for ASR/MT/AST,
//! Adam training with multi-task and pre-training regimes, greedy/beam/
//! ensemble decoding plus a cascaded ASR→MT pipeline, and BLEU/WER scoring.
//!
//! The numerical core is a small reverse-mode autodiff graph; every model
//! gradient is verifiable against central finite differences.

pub mod audio;
pub mod bytesio;
pub mod config;
pub mod error;
pub mod harness;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
