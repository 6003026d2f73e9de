//! Inference and scoring: beam search, WER, word-level perplexity, prompts.

pub mod beam;
pub mod ppl;
pub mod prompts;
pub mod report;
pub mod wer;

pub use beam::{beam_search, greedy, Hypothesis, NextTokenModel};
pub use ppl::word_ppl;
pub use prompts::{PromptLibrary, PromptMode};
pub use wer::{wer, WerCounts};
