//! Text-queried sound event detection (TQ-SED).
//!
//! A language-queried source separation front-end (FiLM-conditioned
//! encoder/decoder with a dual-path recurrent bottleneck) splits a mixture
//! into one track per event query; small per-event CRNN branches then score
//! frame-level activity on each track. The crate also ships the baseline
//! detectors, both training loops, a segment-based metric suite
//! (SDR/SDRI/SI-SDR, error rate, optimal-threshold macro-F1, overlap
//! statistics) and a seeded synthetic dataset generator so the whole
//! pipeline runs at desk scale.

pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sed;
pub mod separation;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
