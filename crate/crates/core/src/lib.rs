// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod autodiff;
pub mod baselines;
mod error;
pub mod eval;
pub mod heatmap;
pub mod lrp;
pub mod methods;
pub mod model;
pub mod par;
pub mod rng;
pub mod tasks;
mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
