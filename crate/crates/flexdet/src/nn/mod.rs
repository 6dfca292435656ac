//! Reverse-mode autodiff over `ndarray` tensors, plus the layers built on it.
//!
//! Everything runs in f64. The tape records one backward closure per produced
//! tensor; evaluation-mode forwards skip recording entirely and cost nothing
//! beyond the arithmetic. All operators have hand-written backward passes that
//! are checked against central finite differences in the test suite.

pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod ops;
pub mod tape;

pub use tape::{Arr, GradMap, Param, Tape, Var};
