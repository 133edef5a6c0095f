// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
pub(crate) mod ops;
mod tape;

pub use gradcheck::{grad_check, numeric_gradient, taped_gradient, RELATIVE_ERROR_FLOOR};
pub use ops::{log_sum_exp, sigmoid, softplus};
pub use tape::{Gradients, Primitive, Tape, Var};
