//! Minimal reverse-mode differentiable arrays.
//!
//! Values live on a [`Tape`] that records each primitive together with the
//! context its backward pass needs. [`Tape::backward`] walks the record in
//! reverse and accumulates gradients into every leaf that asked for one.
//!
//! Layout conventions: convolution and normalization operate on
//! `[N, C, H, W]` with an explicit batch axis; batch size 1 is allowed.

mod array;
mod gradcheck;
mod params;
mod tape;

pub use array::DiffArray;
pub use gradcheck::{gradient_check, relative_error, GradCheckEntry, GradCheckReport, FD_STEP, REL_FLOOR};
pub use params::{sgd_step, uniform_fan_in, Bindings, ParamSet, Sgd};
pub use tape::{NormConfig, NormMode, RunningStats, Tape, Var};

/// Guard used by the skeleton cosine terms for zero-length vectors.
pub const COSINE_EPS: f64 = 1e-8;
