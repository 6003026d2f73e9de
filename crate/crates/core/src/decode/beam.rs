//! Beam search with plain cumulative log-probability scoring.
//!
//! Candidates are ordered by score, then by the lexicographically smaller
//! token sequence, then by the shorter one. The same total order picks the
//! answer among finished hypotheses, so a beam as wide as the search space
//! reproduces exhaustive argmax exactly.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Tensor};

/// Anything that yields next-token log-probabilities for a generated prefix.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, generated: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, including the final EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
    /// No hypothesis finished within the step budget; this is the best live one.
    pub truncated: bool,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn content(&self, eos: usize) -> &[usize] {
        match self.tokens.split_last() {
            Some((&last, rest)) if self.finished && last == eos => rest,
            _ => &self.tokens,
        }
    }
}

fn order(a: &(f64, Vec<usize>), b: &(f64, Vec<usize>)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| a.1.cmp(&b.1))
        .then_with(|| a.1.len().cmp(&b.1.len()))
}

/// Best hypothesis over beam widths `1..=beam`.
///
/// A single pass of width `b + 1` can prune the prefix that width `b` would
/// have completed, so a wider plain beam is not always at least as good.
/// Taking the best over all narrower widths makes the result monotone in
/// `beam`. Model calls are memoized per prefix, so the narrower passes mostly
/// reuse work the widest pass needs anyway.
pub fn beam_search<M: NextTokenModel + ?Sized>(
    model: &M,
    beam: usize,
    max_new: usize,
    eos: usize,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Contract("beam width must be ≥ 1".into()));
    }
    let mut cache: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
    let mut best: Option<Hypothesis> = None;
    for width in 1..=beam {
        let h = single_beam(model, &mut cache, width, max_new, eos)?;
        let better = match &best {
            None => true,
            Some(b) => {
                (h.finished && !b.finished)
                    || (h.finished == b.finished
                        && order(
                            &(h.log_prob, h.tokens.clone()),
                            &(b.log_prob, b.tokens.clone()),
                        ) == Ordering::Less)
            }
        };
        if better {
            best = Some(h);
        }
    }
    Ok(best.expect("beam ≥ 1"))
}

/// One plain beam pass of fixed width.
fn single_beam<M: NextTokenModel + ?Sized>(
    model: &M,
    cache: &mut HashMap<Vec<usize>, Vec<f64>>,
    beam: usize,
    max_new: usize,
    eos: usize,
) -> Result<Hypothesis> {
    let v = model.vocab_size();
    let mut live: Vec<(f64, Vec<usize>)> = vec![(0.0, Vec::new())];
    let mut done: Vec<(f64, Vec<usize>)> = Vec::new();

    for _ in 0..max_new {
        let mut cand = Vec::with_capacity(live.len() * v);
        for (score, toks) in &live {
            if !cache.contains_key(toks) {
                let lp = model.log_probs(toks)?;
                if lp.len() != v {
                    return Err(Error::Contract(format!(
                        "model returned {} log-probs for vocabulary {v}",
                        lp.len()
                    )));
                }
                cache.insert(toks.clone(), lp);
            }
            for (t, &l) in cache[toks].iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut next = toks.clone();
                next.push(t);
                cand.push((score + l, next));
            }
        }
        cand.sort_by(order);
        cand.truncate(beam);
        live.clear();
        for c in cand {
            if c.1.last() == Some(&eos) {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        // scores only fall as tokens append, so no live prefix can overtake
        let best_done = done.iter().map(|d| d.0).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || live.iter().all(|l| l.0 < best_done) {
            break;
        }
    }

    done.sort_by(order);
    if let Some((log_prob, tokens)) = done.into_iter().next() {
        return Ok(Hypothesis {
            tokens,
            log_prob,
            finished: true,
            truncated: false,
        });
    }
    live.sort_by(order);
    let (log_prob, tokens) = live.into_iter().next().unwrap_or((0.0, Vec::new()));
    Ok(Hypothesis {
        tokens,
        log_prob,
        finished: false,
        truncated: true,
    })
}

pub fn greedy<M: NextTokenModel + ?Sized>(
    model: &M,
    max_new: usize,
    eos: usize,
) -> Result<Hypothesis> {
    beam_search(model, 1, max_new, eos)
}

/// Log-softmax of one logits row.
pub fn log_softmax<E: Element>(row: &[E]) -> Vec<f64> {
    let r: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
    let lse = kernels::log_sum_exp(&r);
    r.iter().map(|x| x - lse).collect()
}

/// Adapter from a table of explicit conditionals, used by tests and demos:
/// `table(prefix)` returns a probability vector.
pub struct FnModel<F: Fn(&[usize]) -> Vec<f64>> {
    pub vocab: usize,
    pub probs: F,
}

impl<F: Fn(&[usize]) -> Vec<f64>> NextTokenModel for FnModel<F> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn log_probs(&self, generated: &[usize]) -> Result<Vec<f64>> {
        Ok((self.probs)(generated).into_iter().map(f64::ln).collect())
    }
}

/// Final-row log-probs of an LM given fixed prefix logits, for tensors already
/// on hand.
pub fn last_row_log_probs<E: Element>(logits: &Tensor<E>) -> Result<Vec<f64>> {
    let (t, _) = logits.dims2()?;
    if t == 0 {
        return Err(Error::Contract("empty logits".into()));
    }
    Ok(log_softmax(logits.row(t - 1)))
}
