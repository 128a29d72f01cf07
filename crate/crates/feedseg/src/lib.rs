//! Feedback-guided polyp segmentation.
//!
//! An encoder-decoder segmentation network whose own predictions feed back as
//! next-epoch input masks. The pipeline: a four-stage pyramid encoder, a
//! multi-scale dilated fusion trunk, auxiliary polyp-attribute heads whose
//! outputs become text prompts, a bridge that fuses features with the feedback
//! mask and the prompt embedding, and a decoder gated by mask attention at
//! every stage. Initial masks come from Otsu thresholding; at test time the
//! predicted mask is fed back for a configurable number of refinement
//! iterations.
//!
//! Everything runs on a small tape-based autodiff core ([`tensor`]) so the
//! whole network trains on CPU with exact, finite-difference-checked
//! gradients. With the `parallel` feature (default) the batch-level inner
//! loops run on rayon; disabling it gives a bit-identical sequential build.

pub mod attributes;
pub mod bank;
pub mod bpe;
pub mod bridge;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod otsu;
pub mod par;
pub mod tensor;
pub mod types;

pub use config::RunConfig;
pub use error::{Error, Result};
