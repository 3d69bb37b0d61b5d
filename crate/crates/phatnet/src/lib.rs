//! Physics-guided haze transfer and test-time adaptation for single-image
//! dehazing, built around the atmospheric scattering model
//! `I = J·t + A·(1 − t)`.
//!
//! The crate provides:
//! - [`asm`]: scattering-model composition, transmission synthesis, and
//!   transmission-map edits (gamma, vertical flip);
//! - [`phdt`] / [`phatnet`]: the haze-disentanglement block and the
//!   multi-scale transfer network stacked from it;
//! - [`losses`] / [`trainer`]: haze-transfer-consistency training;
//! - [`dehazer`] / [`adaptation`]: a compact baseline dehazer and its
//!   test-time fine-tuning on transferred haze;
//! - [`datagen`] / [`metrics`]: synthetic-domain generation with known
//!   haze recipes and PSNR/SSIM evaluation;
//! - [`checkpoint`] / [`pngio`] / [`manifest`]: deterministic on-disk
//!   formats used by the CLI.
//!
//! All floating-point pipelines are deterministic: fixed accumulation
//! order, seeded RNG streams, and no dependence on thread count.

pub mod adaptation;
pub mod asm;
pub mod checkpoint;
pub mod datagen;
pub mod dehazer;
pub mod error;
pub mod image;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod phatnet;
pub mod phdt;
pub mod pngio;
pub mod trainer;

pub use error::{PhatError, Result};

/// Version string embedded in checkpoints and run manifests.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
