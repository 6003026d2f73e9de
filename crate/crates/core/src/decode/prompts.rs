//! Instruction prompts placed between the speech block and the assistant tag.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SHORT_PROMPT: &str = "Transcribe speech to text.";

/// Ten paraphrases of the transcription instruction.
pub const DEFAULT_LIBRARY: [&str; 10] = [
    "Transcribe speech to text.",
    "Write down what is said.",
    "Convert the audio to text.",
    "Please transcribe the speech.",
    "Give the transcript of this audio.",
    "What words are spoken here?",
    "Turn the speech into written words.",
    "Recognize the speech and output text.",
    "Produce a transcript of the recording.",
    "Listen and write the spoken words.",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum PromptMode {
    /// Only the assistant tag follows the speech.
    None,
    Fixed {
        text: String,
    },
    /// One prompt per line in `path`, or the built-in library when absent.
    Library {
        #[serde(default)]
        path: Option<PathBuf>,
    },
}

impl Default for PromptMode {
    fn default() -> Self {
        PromptMode::Fixed {
            text: SHORT_PROMPT.into(),
        }
    }
}

impl PromptMode {
    pub fn library(&self) -> Result<PromptLibrary> {
        match self {
            PromptMode::None => PromptLibrary::new(vec![String::new()]),
            PromptMode::Fixed { text } => PromptLibrary::new(vec![text.clone()]),
            PromptMode::Library { path: None } => {
                PromptLibrary::new(DEFAULT_LIBRARY.iter().map(|s| s.to_string()).collect())
            }
            PromptMode::Library { path: Some(p) } => PromptLibrary::load(p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptLibrary {
    prompts: Vec<String>,
}

impl PromptLibrary {
    pub fn new(prompts: Vec<String>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Empty("prompt library".into()));
        }
        Ok(PromptLibrary { prompts })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &str {
        &self.prompts[rng.gen_range(0..self.prompts.len())]
    }

    /// Draw keyed by a seed, so the same key always yields the same prompt.
    pub fn sample_seeded(&self, seed: u64) -> &str {
        self.sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }
}
