//! Closed-loop active inference for joint sensing-resource allocation and
//! control of a mobile entity observed through noisy position fixes.
//!
//! Inference is a Kalman-equivalent Gaussian update; planning is exact
//! Gaussian message passing over a receding horizon, with the discrete
//! subcarrier allocation chosen by enumeration.

// `!(a < b)` comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ckm;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod inference;
pub mod model;
pub mod planner;
pub mod sensing;

pub use error::{Error, Result};
pub use gaussian::Gaussian;
