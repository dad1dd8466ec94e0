//! Adapted multimodal transformer for sentiment regression.
//!
//! A frozen transformer language backbone is tuned with bottleneck adapters
//! and fused layer-wise with tokens produced by small audio and visual
//! encoders; a one-layer head regresses a sentiment score in [-3, 3]. The
//! whole stack runs on a self-contained reverse-mode autodiff tape, so the
//! crate has no deep-learning framework dependency.

pub mod adaptation;
pub mod archive;
pub mod cli;
pub mod config;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod robustness;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod text;
pub mod transformer;
