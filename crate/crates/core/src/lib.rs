//! Core library for YORO, an encoder-only multimodal transformer for
//! visual grounding: given an image and a referring phrase, predict the
//! bounding box of the referred object.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f64 tensors with tape-based reverse-mode gradients
//! - [`geometry`]: boxes, IoU/GIoU, patch-grid coverage
//! - [`config`]: architecture hyperparameters
//! - [`params`]: named parameter store shared by all modules
//! - [`input`], [`encoder`], [`heads`], [`model`]: the network itself
//! - [`matching`]: Hungarian assignment between predictions and ground truth
//! - [`losses`]: box regression, classification, object-text and patch-text
//!   alignment losses
//! - [`data`]: tokenizer, synthetic scene generator, annotation ingestion
//! - [`optim`], [`checkpoint`], [`runtime`]: AdamW, serialization, the
//!   train/eval/infer loops
//! - [`bench`]: per-stage latency breakdown

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod geometry;
pub mod heads;
pub mod image_io;
pub mod input;
pub mod losses;
pub mod matching;
pub mod model;
pub mod optim;
pub mod params;
pub mod runtime;
pub mod tensor;

/// Crate-wide error type. Variants mirror the failure classes surfaced by
/// the public API: shape mismatches, violated call contracts, non-finite
/// numbers, invalid domain values, and I/O or format problems.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("state error: {0}")]
    State(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
