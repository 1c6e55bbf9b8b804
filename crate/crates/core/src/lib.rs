//! Skeleton-graph motion forecasting.
//!
//! Observed 2D skeleton poses form a spatio-temporal graph. A graph
//! convolution stack with a learned adjacency embeds the observation, an
//! optional image branch is concatenated on the time axis, and a convolutional
//! time extrapolator emits every future 3D pose in a single forward pass.
//! Training uses a squared-error data term plus skeleton consistency terms on
//! joint-pair cosines and pairwise distances.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod diffarray;
pub mod error;
pub mod fsutil;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod trainer;

pub use diffarray::{DiffArray, ParamSet, Tape, Var};
pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
