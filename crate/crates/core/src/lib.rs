//! Spatiotemporal foundation model toolkit: synthetic road worlds, an
//! ST tokenizer, instruction prompts, a LoRA-adapted causal backbone, two
//! stage training and task metrics.

pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod pipeline;
pub mod prompting;
pub mod tokenizer;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
