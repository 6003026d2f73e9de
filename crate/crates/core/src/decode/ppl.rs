//! Word-level perplexity: total token NLL divided by the whitespace word count.

use crate::data::tokenizer::{Tokenizer, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::nn::lm::TinyCausalLm;
use crate::nn::pretrain::next_token_stats;
use crate::tensor::Element;

pub fn word_ppl(total_nll: f64, supervised: usize, word_count: usize) -> Result<f64> {
    if supervised == 0 {
        return Err(Error::Empty(
            "perplexity over zero supervised positions".into(),
        ));
    }
    if word_count == 0 {
        return Err(Error::Contract("perplexity needs at least one word".into()));
    }
    Ok((total_nll / word_count as f64).exp())
}

/// Text-only perplexity of `lm` on `<bos> text <eos>` sequences.
pub fn lm_text_ppl<E: Element>(
    lm: &TinyCausalLm<E>,
    tok: &Tokenizer,
    texts: &[String],
) -> Result<f64> {
    let seqs: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| {
            let mut s = vec![BOS_ID];
            s.extend(tok.tokenize(t));
            s.push(EOS_ID);
            s
        })
        .collect();
    let words = texts.iter().map(|t| t.split_whitespace().count()).sum();
    let stats = next_token_stats(lm, &seqs)?;
    word_ppl(stats.nll_sum, stats.supervised, words)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let v = 7.0f64;
        let n = 5;
        assert!((word_ppl(n as f64 * v.ln(), n, n).unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(word_ppl(1.0, 0, 3).is_err());
        assert!(word_ppl(1.0, 3, 0).is_err());
        assert_eq!(word_ppl(0.0, 3, 3).unwrap(), 1.0);
    }
}
