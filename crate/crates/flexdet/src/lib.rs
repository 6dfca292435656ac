//! Flexible-depth multi-scale object detection.
//!
//! A detector built from this crate can shrink at inference time without
//! retraining: every feature stage is split into an essential path that always
//! runs and a refinement path that can be skipped, and the prediction head can
//! stop at any intermediate exit. One set of weights serves every such
//! configuration. Training interleaves two passes per step — the full network
//! learns from ground truth, then the smallest network learns from ground
//! truth plus distillation against the full network's frozen outputs — so the
//! whole family of sub-networks stays accurate.
//!
//! Module map:
//! - [`config`]: architecture and depth-configuration descriptions, config
//!   enumeration, analytic FLOP estimates.
//! - [`stages`]: adaptable residual and split-aggregate stage blocks with
//!   per-mode normalization branches.
//! - [`model`]: full detector assembly (backbone, neck, heads) for both the
//!   query-decoder and dense-grid head styles.
//! - [`assignment`]: Hungarian matching, task-aligned assignment, and the
//!   teacher/student anchor bookkeeping used by distillation.
//! - [`losses`]: ground-truth losses and the distillation terms.
//! - [`trainer`]: the two-pass training loop, optimizer, checkpoints.
//! - [`data`]: synthetic scene generator and COCO-style mAP evaluation.
//! - [`analysis`]: representation-similarity (CKA) tooling, depth sweeps,
//!   precision/recall breakdowns.
//! - [`nn`]: the reverse-mode autodiff tape and operator set everything above
//!   is built on (f64 end to end, deterministic).

pub mod analysis;
pub mod assignment;
pub mod config;
pub mod data;
pub mod exec;
pub mod losses;
pub mod model;
pub mod nn;
pub mod stages;
pub mod trainer;

/// Crate-wide error type. Variants are coarse on purpose: callers mostly need
/// to distinguish bad input from runtime failure.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration, spec, or argument.
    Invalid(String),
    /// I/O or serialization failure, with context.
    Io(String),
    /// Numerical failure (non-finite loss, infeasible assignment, ...).
    Numeric(String),
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Error::Invalid(m) => write!(f, "invalid input: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
