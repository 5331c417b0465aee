//! Keyword-conditioned report generation for retinal images.
//!
//! The crate covers the whole pipeline: a small autodiff tensor engine,
//! text and dataset handling, image/keyword encoders, average and
//! cross-attention fusion, recurrent and masked self-attention decoders, a
//! multi-label keyword predictor, caption metrics, attention-trace export
//! and the training loop tying them together.

pub mod dataset;
pub mod encoders;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod numeric;
pub mod predictor;
pub mod synth;
pub mod text;
pub mod training;

pub use error::{Error, Result};
