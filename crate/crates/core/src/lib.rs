// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic grid-world workbench for localization circuits in a toy
//! vision-language transformer.

// `!(x > 0.0)` style checks are kept because they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod causal;
pub mod error;
pub mod eval;
pub mod gridworld;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod planted;
pub mod probes;
pub mod runner;
pub mod training;

pub use error::{Error, Result};
