//! Differentiable computation core: a reverse-mode tape, symbolic scalar
//! expressions compiled onto it, and parameter storage with optimizers and
//! checkpoints.

mod expr;
mod params;
mod tape;

pub use expr::{evaluate, gradient, Evaluation, Expr};
pub use params::{sgd_adam_step, GradMap, Optimizer, ParamStore};
pub use tape::{Gradients, Tape, Var, LOG_MIN_ARG};
