//! Functional structural equation models (FSEMs) with latent
//! Gaussian-process factors, fitted to sparse or irregular longitudinal data
//! by a penalized Monte Carlo EM algorithm.
//!
//! The crate provides:
//!
//! * [`basis`] — B-spline / Fourier bases, evaluation matrices, stacked
//!   design blocks and roughness penalties;
//! * [`model`] — path-model declaration, validation, and the per-subject
//!   design/coefficient block assembly;
//! * [`dataset`] — long-format ingestion and sampling-design generators;
//! * [`gp`] — joint Gaussian moments of latents and observations,
//!   conditioning, and sampling;
//! * [`fit`] — the Monte Carlo EM with closed-form penalized M-steps and
//!   cross-validated smoothing selection;
//! * [`inference`] — bootstrap coefficient covariances and confidence bands;
//! * [`gof`] — model-implied covariances and goodness-of-fit indices;
//! * [`sim`] — the two built-in simulation studies and their replication
//!   reports.

pub mod basis;
pub mod dataset;
pub mod fit;
pub mod gof;
pub mod gp;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod report;
pub mod sim;

pub use basis::{BasisKind, BasisSystem, DesignBlocks, PenaltyKind, PenaltyMatrix};
pub use model::{ModelSpec, ValidatedModel};
