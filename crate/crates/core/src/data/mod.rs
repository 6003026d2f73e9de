//! Data formats and the synthetic task.

pub mod features;
pub mod manifest;
pub mod synth;
pub mod tokenizer;
