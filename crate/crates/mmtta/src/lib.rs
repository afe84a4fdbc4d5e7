//! Streaming Gaussian-discriminant engine for multi-modal test-time
//! adaptation on two-modality feature streams.
//!
//! The library maintains per-class Gaussian models for three perspectives of
//! every sample (modality 1, modality 2, fused), updates them online from
//! sufficient statistics, fuses their posterior evidence with a frozen linear
//! head, detects which modality is distribution-shifted via symmetric KL
//! against the fused posterior, and rectifies the shifted side with a
//! one-sided contrastive loss. A configurable toy encoder stands in for a
//! real backbone so the full gradient routing can be exercised end to end on
//! synthetic streams.

pub mod adam;
pub mod encoder;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod fusion;
pub mod gaussian;
pub mod io;
pub mod math;
pub mod rectify;
pub mod report;
pub mod streaming;
pub mod synth;

pub use error::{Error, Result};
