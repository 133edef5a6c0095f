// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic tasks and the trainer used to fit models to them.

mod data;
mod train;

pub use data::{
    example, generate, generate_range, load_dataset, read_jsonl, save_dataset, write_jsonl, Example, TaskKind,
    TaskSpec, KEYWORDS_PER_CLASS, NOISE_SENTENCE_LEN,
};
pub use train::{evaluate, evaluate_accuracy, train, EpochStats, TrainConfig, TrainOutcome};
