//! Word error rate by minimum edit distance.
//!
//! Among minimum-cost alignments the one with the most substitutions is
//! reported, which makes the counts symmetric: swapping reference and
//! hypothesis swaps insertions and deletions and keeps substitutions.

use serde::{Deserialize, Serialize};

use crate::data::tokenizer::normalize;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerCounts {
    pub wer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Edit operation of one alignment column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match,
    Sub,
    Ins,
    Del,
}

pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<WerCounts> {
    let (counts, _) = align(reference, hypothesis)?;
    Ok(counts)
}

/// Convenience over raw strings; both sides are normalized first.
pub fn wer_text(reference: &str, hypothesis: &str) -> Result<WerCounts> {
    let r = normalize(reference);
    let h = normalize(hypothesis);
    let rw: Vec<&str> = r.split_whitespace().collect();
    let hw: Vec<&str> = h.split_whitespace().collect();
    wer(&rw, &hw)
}

/// Counts plus the alignment path, reference-major.
pub fn align<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<(WerCounts, Vec<EditOp>)> {
    if reference.is_empty() {
        return Err(Error::Contract(
            "WER is undefined for an empty reference".into(),
        ));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    // cost[i][j] = (edits, -substitutions), minimized lexicographically
    let mut cost = vec![vec![(0usize, 0isize); m + 1]; n + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = (i, 0);
    }
    for (j, cell) in cost[0].iter_mut().enumerate() {
        *cell = (j, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let (c, s) = cost[i - 1][j - 1];
            let diag = if same { (c, s) } else { (c + 1, s - 1) };
            let del = (cost[i - 1][j].0 + 1, cost[i - 1][j].1);
            let ins = (cost[i][j - 1].0 + 1, cost[i][j - 1].1);
            cost[i][j] = diag.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let (c, s) = cost[i - 1][j - 1];
            let diag = if same { (c, s) } else { (c + 1, s - 1) };
            if diag == cost[i][j] {
                ops.push(if same { EditOp::Match } else { EditOp::Sub });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && (cost[i - 1][j].0 + 1, cost[i - 1][j].1) == cost[i][j] {
            ops.push(EditOp::Del);
            i -= 1;
        } else {
            ops.push(EditOp::Ins);
            j -= 1;
        }
    }
    ops.reverse();
    let count = |op| ops.iter().filter(|&&o| o == op).count();
    let counts = WerCounts {
        substitutions: count(EditOp::Sub),
        insertions: count(EditOp::Ins),
        deletions: count(EditOp::Del),
        ref_words: n,
        wer: cost[n][m].0 as f64 / n as f64,
    };
    Ok((counts, ops))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn hand_examples() {
        assert_eq!(wer(&w("a b c"), &w("a b c")).unwrap().wer, 0.0);
        let c = wer(&w("a b c"), &w("a x c")).unwrap();
        assert_eq!((c.wer, c.substitutions), (1.0 / 3.0, 1));
        let c = wer(&w("x"), &w("x y y")).unwrap();
        assert_eq!((c.wer, c.insertions), (2.0, 2));
        assert!(wer::<&str>(&[], &w("a")).is_err());
    }

    #[test]
    fn prefers_substitutions_among_ties() {
        let c = wer(&w("a b"), &w("b c")).unwrap();
        assert_eq!((c.substitutions, c.insertions, c.deletions), (2, 0, 0));
    }

    #[test]
    fn normalization_applies_to_both_sides() {
        assert_eq!(wer_text("A  b", "a B").unwrap().wer, 0.0);
    }
}
