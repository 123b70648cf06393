// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense `f64` arithmetic with tape-based reverse-mode gradients.

mod array;
mod tape;

pub use array::{gelu, gelu_grad, layer_norm, matmul, softmax, DenseArray, LN_EPS};
pub(crate) use array::{gemm_acc, normalize_row, softmax_in_place};
pub use tape::{Gradients, Tape, Var};
