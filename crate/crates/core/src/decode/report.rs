//! Hypothesis files, scoring reports, and the plain-text alignment dump.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::manifest::Manifest;
use crate::data::tokenizer::normalize;
use crate::decode::wer::{align, EditOp};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub id: String,
    pub hyp: String,
    pub log_prob: f64,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisFile {
    pub config_hash: String,
    pub hypotheses: Vec<HypothesisRecord>,
}

impl HypothesisFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub hyp: String,
    #[serde(rename = "S")]
    pub substitutions: usize,
    #[serde(rename = "I")]
    pub insertions: usize,
    #[serde(rename = "D")]
    pub deletions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub config_hash: String,
    pub corpus_wer: f64,
    pub ref_words: usize,
    pub per_utterance: Vec<UtteranceScore>,
    #[serde(skip)]
    pub alignment_dump: String,
}

impl ScoreReport {
    pub fn errors(&self) -> usize {
        self.per_utterance
            .iter()
            .map(|u| u.substitutions + u.insertions + u.deletions)
            .sum()
    }
}

/// Scores `(id, reference, hypothesis)` triples; corpus WER pools edits over
/// all reference words.
pub fn score_pairs(config_hash: &str, pairs: &[(String, String, String)]) -> Result<ScoreReport> {
    let mut per = Vec::with_capacity(pairs.len());
    let mut dump = String::new();
    let (mut errors, mut words) = (0usize, 0usize);
    for (id, r, h) in pairs {
        let (r, h) = (normalize(r), normalize(h));
        let rw: Vec<&str> = r.split_whitespace().collect();
        let hw: Vec<&str> = h.split_whitespace().collect();
        let (c, ops) =
            align(&rw, &hw).map_err(|e| Error::Validation(format!("utterance {id}: {e}")))?;
        errors += c.errors();
        words += c.ref_words;
        write_alignment(&mut dump, id, &rw, &hw, &ops);
        per.push(UtteranceScore {
            id: id.clone(),
            reference: r.clone(),
            hyp: h.clone(),
            substitutions: c.substitutions,
            insertions: c.insertions,
            deletions: c.deletions,
        });
    }
    if words == 0 {
        return Err(Error::Empty("no reference words to score".into()));
    }
    Ok(ScoreReport {
        config_hash: config_hash.to_string(),
        corpus_wer: errors as f64 / words as f64,
        ref_words: words,
        per_utterance: per,
        alignment_dump: dump,
    })
}

/// Joins references from a manifest with a hypothesis file; the id sets must match.
pub fn score_files(refs: &Manifest, hyps: &HypothesisFile) -> Result<ScoreReport> {
    let ref_ids: BTreeSet<&str> = refs.records.iter().map(|r| r.id.as_str()).collect();
    let hyp_ids: BTreeSet<&str> = hyps.hypotheses.iter().map(|h| h.id.as_str()).collect();
    if ref_ids != hyp_ids || hyp_ids.len() != hyps.hypotheses.len() {
        let missing: Vec<_> = ref_ids.difference(&hyp_ids).take(5).collect();
        let extra: Vec<_> = hyp_ids.difference(&ref_ids).take(5).collect();
        return Err(Error::Validation(format!(
            "reference and hypothesis id sets differ (missing {missing:?}, extra {extra:?}, {} hyps for {} ids)",
            hyps.hypotheses.len(),
            hyp_ids.len()
        )));
    }
    let pairs: Vec<(String, String, String)> = refs
        .records
        .iter()
        .map(|r| {
            let h = hyps
                .hypotheses
                .iter()
                .find(|h| h.id == r.id)
                .expect("id checked");
            (r.id.clone(), r.transcript.clone(), h.hyp.clone())
        })
        .collect();
    score_pairs(&hyps.config_hash, &pairs)
}

fn write_alignment(out: &mut String, id: &str, r: &[&str], h: &[&str], ops: &[EditOp]) {
    let (mut i, mut j) = (0, 0);
    let (mut top, mut bot, mut mark) = (Vec::new(), Vec::new(), Vec::new());
    for op in ops {
        let (a, b, m) = match op {
            EditOp::Match => (r[i], h[j], " "),
            EditOp::Sub => (r[i], h[j], "S"),
            EditOp::Del => (r[i], "*", "D"),
            EditOp::Ins => ("*", h[j], "I"),
        };
        if matches!(op, EditOp::Match | EditOp::Sub | EditOp::Del) {
            i += 1;
        }
        if matches!(op, EditOp::Match | EditOp::Sub | EditOp::Ins) {
            j += 1;
        }
        let w = a.len().max(b.len());
        top.push(format!("{a:w$}"));
        bot.push(format!("{b:w$}"));
        mark.push(format!("{m:w$}"));
    }
    let _ = writeln!(out, "id:  {id}");
    let _ = writeln!(out, "REF: {}", top.join(" "));
    let _ = writeln!(out, "HYP: {}", bot.join(" "));
    let _ = writeln!(out, "     {}\n", mark.join(" ").trim_end());
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_pairs_score_zero_and_dump_lists_every_utterance() {
        let pairs = vec![
            ("u1".to_string(), "a b".to_string(), "a b".to_string()),
            ("u2".to_string(), "c".to_string(), "C".to_string()),
        ];
        let r = score_pairs("h", &pairs).unwrap();
        assert_eq!(r.corpus_wer, 0.0);
        assert_eq!(r.alignment_dump.matches("REF:").count(), 2);
    }

    #[test]
    fn corpus_wer_pools_words() {
        let pairs = vec![
            (
                "u1".to_string(),
                "a b c d".to_string(),
                "a b c d".to_string(),
            ),
            ("u2".to_string(), "e".to_string(), "f".to_string()),
        ];
        assert_eq!(score_pairs("h", &pairs).unwrap().corpus_wer, 0.2);
    }
}
