//! Word-level tokenizer over the toy vocabulary plus a handful of specials.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const BOS_ID: usize = 3;
/// Target id meaning "no loss here". Never a valid vocabulary entry.
pub const IGNORE_ID: usize = usize::MAX;

pub const SPECIALS: [&str; 4] = ["<pad>", "<eos>", "<unk>", "<bos>"];
pub const USER_MARKER: &str = "user:";
pub const ASSISTANT_MARKER: &str = "assistant:";

/// Lowercase and collapse runs of whitespace to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Specials first, then the two template markers, then `words` in first-seen order.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.push(USER_MARKER.into());
        all.push(ASSISTANT_MARKER.into());
        for w in words {
            for piece in normalize(w.as_ref()).split(' ').filter(|p| !p.is_empty()) {
                if !all.iter().any(|x| x == piece) {
                    all.push(piece.to_string());
                }
            }
        }
        Self::from_words(all)
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Tokenizer { words, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn user_id(&self) -> usize {
        self.index[USER_MARKER]
    }

    pub fn assistant_id(&self) -> usize {
        self.index[ASSISTANT_MARKER]
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        normalize(text)
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i).map_or(SPECIALS[UNK_ID], String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: Tokenizer = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let ok = raw.words.len() >= SPECIALS.len() + 2
            && raw.words[..SPECIALS.len()]
                .iter()
                .zip(SPECIALS)
                .all(|(a, b)| a == b)
            && raw.words.iter().any(|w| w == USER_MARKER)
            && raw.words.iter().any(|w| w == ASSISTANT_MARKER);
        if !ok {
            return Err(Error::Validation(format!(
                "{} is not a tokenizer vocabulary",
                path.display()
            )));
        }
        Ok(Self::from_words(raw.words))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::new(["a", "b", "Transcribe speech"])
    }

    #[test]
    fn empty_roundtrip() {
        let t = tok();
        assert!(t.tokenize("").is_empty());
        assert_eq!(t.detokenize(&[]), "");
    }

    #[test]
    fn simple_roundtrip() {
        let t = tok();
        let ids = t.tokenize("a b");
        assert_eq!(ids, vec![t.id("a").unwrap(), t.id("b").unwrap()]);
        assert_eq!(t.detokenize(&ids), "a b");
        assert_eq!(t.detokenize(&t.tokenize("  A   b ")), normalize("  A   b "));
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let t = tok();
        assert_eq!(t.tokenize("a zebra"), vec![t.id("a").unwrap(), UNK_ID]);
        assert_eq!(t.detokenize(&[UNK_ID]), "<unk>");
    }

    #[test]
    fn specials_and_markers_have_fixed_layout() {
        let t = tok();
        assert_eq!(t.id("<eos>"), Some(EOS_ID));
        assert_eq!(t.user_id(), 4);
        assert_eq!(t.assistant_id(), 5);
        assert_eq!(t.tokenize("USER:"), vec![4]);
        assert_eq!(t.id("transcribe"), Some(8));
    }

    #[test]
    fn save_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tok.json");
        let t = tok();
        t.save(&p).unwrap();
        assert_eq!(Tokenizer::load(&p).unwrap(), t);
    }
}
