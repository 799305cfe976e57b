//! Learning safety value functions from safe, semisafe and failed
//! demonstrations, and filtering controls with the learned function.

// `!(a <= b)` comparisons are used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod demonstrations;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod filter;
pub mod io;
pub mod learner;
pub mod qp;
pub mod rbf;
pub mod service;
pub mod simgen;
pub use error::{Error, Result};
