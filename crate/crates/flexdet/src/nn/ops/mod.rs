//! Operator set for the tape.
//!
//! Each op computes its value eagerly and, when recording, pushes a closure
//! that maps the upstream gradient to gradients for the recorded inputs.
//! Constants never receive gradients — the `GradSink::add_to` calls for them
//! are no-ops, and their gradient arrays are never even materialized.

pub mod basic;
pub mod conv;
pub mod linalg;
pub mod loss;
pub mod norm;

pub use basic::*;
pub use conv::*;
pub use linalg::*;
pub use loss::*;
pub use norm::*;
