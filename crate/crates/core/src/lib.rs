//! Articulated virtual-human simulation with task-space control and
//! static balance enforced as a unilateral constraint.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with the bound.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod balance;
pub mod com;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod lcp;
pub mod math;
pub mod model;

pub use error::{Error, Result};
