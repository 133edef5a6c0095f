// SPDX-License-Identifier: MIT OR Apache-2.0

//! The selective state-space classifier.

pub mod block;
mod checkpoint;
mod classifier;
mod config;
mod params;

pub use block::{BlockTrace, BlockVars, RMS_EPS};
pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC};
pub use classifier::{forward, ForwardTrace, LayerTrace, LayerVars, MambaModel, ModelVars};
pub(crate) use classifier::argmax;
pub use config::ModelConfig;
pub use params::{layout, BlockParams, MambaParams, ParamInit, ParamSpec, EMBEDDING_STD};
