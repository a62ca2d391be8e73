//! Stochastic sub-grid parametrization calibration for the two-scale
//! Lorenz '96 system.
//!
//! The library covers the full pipeline:
//!
//! * [`dynamics`] — tendencies of the two-scale truth system and the coarse
//!   single-scale system with a pluggable forcing term.
//! * [`integrators`] — deterministic SSPRK3, its stochastic extension in the
//!   Stratonovich convention, and rollout drivers with divergence detection.
//! * [`dataset`] — truth-data generation, sub-grid tendency measurement,
//!   train/validation splitting, and binary persistence.
//! * [`pod`] — proper orthogonal decomposition of the sub-grid tendency field.
//! * [`models`] — the sub-grid forcing models (local polynomial, global POD,
//!   coupled Ornstein–Uhlenbeck in additive and multiplicative form) and the
//!   derivative-fitting calibration routines.
//! * [`crps`] — the CRPS objective, its spread-scaled variant, and the
//!   per-batch training loss.
//! * [`autodiff`] — a reverse-mode tape with vector-valued primitives for
//!   pathwise gradients through stochastic rollouts.
//! * [`trainer`] — the batched trajectory-learning loop with Adam updates.
//! * [`eval`] — ensemble forecasts, climate runs, and verification metrics.
//! * [`report`] — CSV/JSON emission of experiment outputs.

pub mod autodiff;
pub mod container;
pub mod crps;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod integrators;
pub mod linalg;
pub mod models;
pub mod pod;
pub mod report;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
