//! Desk-scale, config-driven benchmark for self-supervised pretraining of
//! image encoders and their fine-tuned performance on endoscopy-style vision
//! tasks: classification, detection scoring, binary segmentation, and
//! monocular depth estimation.
//!
//! The crate provides synthetic data generation, the three pretraining
//! objectives (momentum-contrast, redundancy-reduction, masked
//! reconstruction) with simulated multi-worker semantics, miniature
//! convolutional and ViT-style encoders, fine-tuning heads and losses, the
//! full evaluation-metric suite, and a cross-pipeline improvement analysis.

pub mod analysis;
pub mod augment;
pub mod config;
pub mod data;
pub mod encoders;
pub mod heads;
pub mod imageops;
pub mod metrics;
pub mod ssl;
pub mod store;
pub mod trainer;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid ratios: {0}")]
    InvalidRatios(String),
    #[error("empty class: {0}")]
    EmptyClass(String),
    #[error("undefined cosine: zero vector")]
    ZeroVector,
    #[error("loss undefined with no masked tokens")]
    NoMaskedTokens,
    #[error("MAE requires token encoder")]
    MaeNeedsTokens,
    #[error("undefined recall: zero ground-truth boxes")]
    NoGroundTruth,
    #[error("undefined relative improvement: zero base error")]
    ZeroBaseError,
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("run already exists at {0}; rerun with --force to archive it")]
    RunExists(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
