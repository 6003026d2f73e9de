//! Reference implementations written independently of the library code.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Downsampling by explicit index arithmetic: output row `i`, column
/// `j·d + c` is input row `k·i + j`, column `c`.
pub fn downsample_loops(h: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let d = h.first().map_or(0, Vec::len);
    let n = h.len() / k;
    let mut z = vec![vec![0.0; k * d]; n];
    for (i, row) in z.iter_mut().enumerate() {
        for j in 0..k {
            for c in 0..d {
                row[j * d + c] = h[k * i + j][c];
            }
        }
    }
    z
}

/// Every (S, I, D) triple reachable by some monotone alignment of `r`
/// against `h`, by enumerating alignment paths cell by cell.
pub fn all_alignment_counts(r: &[u8], h: &[u8]) -> BTreeSet<(usize, usize, usize)> {
    let (n, m) = (r.len(), h.len());
    let mut cells: Vec<Vec<BTreeSet<(usize, usize, usize)>>> =
        vec![vec![BTreeSet::new(); m + 1]; n + 1];
    cells[0][0].insert((0, 0, 0));
    for i in 0..=n {
        for j in 0..=m {
            let here: Vec<_> = cells[i][j].iter().copied().collect();
            for (s, ins, del) in here {
                if i < n && j < m {
                    let sub = usize::from(r[i] != h[j]);
                    cells[i + 1][j + 1].insert((s + sub, ins, del));
                }
                if j < m {
                    cells[i][j + 1].insert((s, ins + 1, del));
                }
                if i < n {
                    cells[i + 1][j].insert((s, ins, del + 1));
                }
            }
        }
    }
    std::mem::take(&mut cells[n][m])
}

/// Minimum edit count and the triples achieving it.
pub fn optimal_alignments(r: &[u8], h: &[u8]) -> (usize, Vec<(usize, usize, usize)>) {
    let all = all_alignment_counts(r, h);
    let best = all.iter().map(|(s, i, d)| s + i + d).min().unwrap_or(0);
    (
        best,
        all.into_iter()
            .filter(|(s, i, d)| s + i + d == best)
            .collect(),
    )
}

/// Every sequence over `0..alphabet` of length `0..=max_len`.
pub fn all_sequences(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for a in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(a);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// A random conditional model: each prefix gets its own Dirichlet-ish
/// distribution drawn from a seed derived from the prefix.
#[derive(Clone)]
pub struct RandomToyLm {
    pub vocab: usize,
    pub seed: u64,
    /// Larger values give peakier distributions.
    pub sharpness: f64,
}

impl RandomToyLm {
    pub fn probs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut key = self.seed;
        for &t in prefix {
            key = key.wrapping_mul(0x100_0000_01b3).wrapping_add(t as u64 + 1);
        }
        let mut r = ChaCha8Rng::seed_from_u64(key);
        let w: Vec<f64> = (0..self.vocab)
            .map(|_| r.gen_range(0.01f64..1.0).powf(self.sharpness))
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }

    pub fn log_prob(&self, seq: &[usize]) -> f64 {
        (0..seq.len())
            .map(|i| self.probs(&seq[..i])[seq[i]].ln())
            .sum()
    }
}

/// Best finished sequence (ending in `eos`, no earlier `eos`, at most
/// `max_new` tokens) by exhaustive enumeration. Ties: higher score, then
/// lexicographically smaller, then shorter.
pub fn exhaustive_best(lm: &RandomToyLm, max_new: usize, eos: usize) -> Option<(f64, Vec<usize>)> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        if prefix.len() == max_new {
            continue;
        }
        for t in 0..lm.vocab {
            let mut s = prefix.clone();
            s.push(t);
            if t == eos {
                let score = lm.log_prob(&s);
                let better = match &best {
                    None => true,
                    Some((b, bs)) => {
                        score > *b || (score == *b && (s < *bs || (s == *bs && s.len() < bs.len())))
                    }
                };
                if better {
                    best = Some((score, s));
                }
            } else {
                stack.push(s);
            }
        }
    }
    best
}

/// Scalar AdamW on the bowl `a·(x − c)²`, with bias correction and
/// decoupled weight decay. Returns the iterate after each step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_bowl_trace(
    x0: f64,
    a: f64,
    c: f64,
    lrs: &[f64],
    beta1: f64,
    beta2: f64,
    eps: f64,
    wd: f64,
) -> Vec<f64> {
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut out = Vec::with_capacity(lrs.len());
    for (t, &lr) in lrs.iter().enumerate() {
        let t = (t + 1) as i32;
        let g = 2.0 * a * (x - c);
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        let mhat = m / (1.0 - beta1.powi(t));
        let vhat = v / (1.0 - beta2.powi(t));
        x -= lr * wd * x;
        x -= lr * mhat / (vhat.sqrt() + eps);
        out.push(x);
    }
    out
}
