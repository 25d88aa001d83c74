//! Data-enabled policy optimization (DeePO) for direct, adaptive,
//! data-driven learning of the linear quadratic regulator.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod baselines;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod par;
pub mod policy;
pub mod rng;
pub mod scenarios;
pub mod stats;
pub mod timing;

pub use error::{Error, Result};
