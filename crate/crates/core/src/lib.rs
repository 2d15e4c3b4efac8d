//! Causal affect prediction from past facial frames.
//!
//! The pipeline predicts the current valence/arousal of a face using only
//! frames that are at least a fixed lead older than the target frame:
//!
//! - [`dataset`]: frame-indexed video datasets, annotation files, PPM frames
//!   and a synthetic generator with known ground truth.
//! - [`sampler`]: causal window construction (offsets, stride, lead and the
//!   missing-frame fallback).
//! - [`neural`]: dense tensors with hand-written backward passes for the
//!   fully-connected and LSTM layers, dropout, Adam, checkpoints and a
//!   finite-difference gradient checker.
//! - [`metrics`]: concordance correlation coefficient, the `1 - CCC` loss and
//!   evaluation reports.
//! - [`models`]: feature extractors, the single-image head and the
//!   LSTM-based causality extractor.
//! - [`training`]: mini-batch training with early stopping.
//! - [`streaming`]: a bounded, frame-by-frame inference engine.
//! - [`cli`]: the `capnet` command line.
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

pub mod cli;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod metrics;
pub mod models;
pub mod neural;
pub mod sampler;
pub mod streaming;
pub mod training;

pub use dataset::{AffectState, FrameRef, Label, LabeledVideo};
pub use error::{Error, Result};
pub use sampler::{SampleWindow, SamplerConfig};
