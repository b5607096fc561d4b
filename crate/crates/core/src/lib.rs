//! S6-based temporal action localization at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff, AdamW.
//! - [`s6`]: selective state-space kernel (input-dependent projections,
//!   zero-order-hold discretization, sequential and chunked scans).
//! - [`blocks`]: feature-aggregated bidirectional S6 blocks (time- and
//!   channel-axis variants).
//! - [`backbone`]: embedding, recurrent stem, multi-scale branch pyramid,
//!   and neck normalization.
//! - [`heads`]: classification/regression towers, target assignment,
//!   losses, and segment decoding.
//! - [`eval`]: temporal IoU, NMS, average precision, mAP reports.
//! - [`data`]: feature/annotation/prediction file formats and the synthetic
//!   dataset generator.
//! - [`model`]: full network assembly plus checkpoint serialization.
//! - [`train`]: the training loop used by the CLI and the test suite.
//! - [`gradcheck`]: central finite-difference verification harness.
//! - [`scanbench`]: timing/correctness comparison of the scan variants.

pub mod backbone;
pub mod blocks;
pub mod data;
pub mod gradcheck;
pub mod s6;
pub mod tensor;

/// Crate-wide error for everything above raw tensor ops.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("validation: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub(crate) fn validation_err(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
