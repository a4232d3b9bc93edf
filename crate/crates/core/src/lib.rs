//! Energy-constrained rationale extraction.
//!
//! A frozen bias rationale model scores every token with a bias energy; a
//! task rationale model is then trained under a penalty that keeps
//! high-bias tokens out of its rationale unless the task needs them.

pub mod data;
pub mod debias;
pub mod error;
pub mod eval;
pub mod gates;
pub mod numerics;
pub mod rationale;

pub use error::{Error, Result};
