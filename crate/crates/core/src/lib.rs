//! Wafer-level etch depth profile regression from in-situ process time series.
//!
//! The pipeline turns multichannel process-parameter and optical-emission
//! time series into an 89-point etch depth profile per wafer, decomposed
//! into a zero-mean spatial shape and a scalar wafer mean:
//!
//! 1. [`data`] — on-disk dataset format, loading, lot-wise k-fold splits.
//! 2. [`conditioning`] — channel selection, active-phase detection,
//!    alignment/resampling, per-wafer instance normalization.
//! 3. [`model`] — patch embedding, cross-attention reprogramming onto a
//!    frozen transformer backbone, per-channel shape/mean heads, aggregation.
//! 4. [`train`] — composite loss, reverse-mode gradients, Adam loop,
//!    finite-difference gradient checker.
//! 5. [`eval`] — metrics, global-mean baseline, cross-validation driver.
//! 6. [`synth`] — deterministic synthetic dataset generator with planted
//!    ground truth for end-to-end verification.

pub mod autodiff;
pub mod conditioning;
pub mod data;
pub mod eval;
pub mod model;
pub mod synth;
pub mod train;

/// Number of measurement sites in a wafer depth profile.
pub const PROFILE_POINTS: usize = 89;
