//! Synthetic speech-like task: bigram-grammar word sequences rendered as
//! runs of noisy codebook frames.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::data::features::write_features;
use crate::data::manifest::{Manifest, UtteranceRecord};
use crate::data::tokenizer::{Tokenizer, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const WORD_LIST: [&str; 64] = [
    "apple", "river", "stone", "cloud", "green", "table", "music", "light", "horse", "bread",
    "chair", "ocean", "tiger", "lemon", "paper", "storm", "glass", "field", "night", "smile",
    "train", "piano", "eagle", "honey", "mountain", "garden", "silver", "window", "forest",
    "candle", "winter", "rocket", "button", "castle", "dragon", "pepper", "shadow", "island",
    "marble", "orange", "pillow", "rabbit", "saddle", "thunder", "violet", "wagon", "yellow",
    "zebra", "anchor", "basket", "copper", "desert", "feather", "harbor", "jacket", "kettle",
    "ladder", "meadow", "needle", "puzzle", "quartz", "ribbon", "spider", "turtle",
];

fn word_name(i: usize) -> String {
    WORD_LIST
        .get(i)
        .map_or_else(|| format!("word{i}"), |w| w.to_string())
}

/// Knobs from which a [`SyntheticTaskSpec`] is derived deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub vocab_size: usize,
    /// Successors per word in the bigram table.
    pub branching: usize,
    pub frames_per_word: usize,
    pub jitter: Vec<i64>,
    pub noise_std: f64,
    pub feature_dim: usize,
    pub frame_rate_hz: f64,
    pub min_words: usize,
    pub max_words: usize,
    /// Seed of the grammar and codebook.
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            vocab_size: 50,
            branching: 8,
            frames_per_word: 5,
            jitter: vec![-1, 0, 1],
            noise_std: 0.1,
            feature_dim: 16,
            frame_rate_hz: 50.0,
            min_words: 3,
            max_words: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub words: Vec<String>,
    /// Distribution of the first word.
    pub initial: Vec<f64>,
    /// Row-stochastic bigram table `[vocab × vocab]`.
    pub transitions: Vec<Vec<f64>>,
    /// One feature row per word `[vocab × feature_dim]`.
    pub codebook: Vec<Vec<f64>>,
    pub frames_per_word: usize,
    pub jitter: Vec<i64>,
    pub noise_std: f64,
    pub frame_rate_hz: f64,
    pub min_words: usize,
    pub max_words: usize,
}

impl SyntheticTaskSpec {
    pub fn from_params(p: &SynthParams) -> Result<Self> {
        if p.vocab_size < 2 || p.branching == 0 || p.feature_dim == 0 {
            return Err(Error::config(
                "synth",
                "vocab_size ≥ 2, branching ≥ 1, feature_dim ≥ 1 required",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let v = p.vocab_size;
        let words = (0..v).map(word_name).collect();
        let initial = vec![1.0 / v as f64; v];
        let branching = p.branching.min(v);
        let all: Vec<usize> = (0..v).collect();
        let transitions = (0..v)
            .map(|_| {
                let mut row = vec![0.0; v];
                let succ: Vec<usize> = all.choose_multiple(&mut rng, branching).copied().collect();
                let w: Vec<f64> = succ.iter().map(|_| rng.gen_range(0.2..1.0)).collect();
                let z: f64 = w.iter().sum();
                for (&s, &x) in succ.iter().zip(&w) {
                    row[s] = x / z;
                }
                row
            })
            .collect();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let codebook = (0..v)
            .map(|_| {
                (0..p.feature_dim)
                    .map(|_| normal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let spec = SyntheticTaskSpec {
            words,
            initial,
            transitions,
            codebook,
            frames_per_word: p.frames_per_word,
            jitter: p.jitter.clone(),
            noise_std: p.noise_std,
            frame_rate_hz: p.frame_rate_hz,
            min_words: p.min_words,
            max_words: p.max_words,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.codebook.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.words.len();
        let bad = |m: String| Err(Error::Validation(m));
        if self.transitions.len() != v || self.codebook.len() != v || self.initial.len() != v {
            return bad(format!("table sizes disagree with vocabulary of {v}"));
        }
        let sums_to_one = |row: &[f64]| (row.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if !sums_to_one(&self.initial) {
            return bad("initial distribution does not sum to 1".into());
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.len() != v || !sums_to_one(row) || row.iter().any(|&x| x < 0.0) {
                return bad(format!("transition row {i} is not a distribution"));
            }
        }
        let d = self.feature_dim();
        if d == 0 || self.codebook.iter().any(|r| r.len() != d) {
            return bad("codebook rows must share a positive dimension".into());
        }
        for i in 0..v {
            for j in i + 1..v {
                if self.codebook[i] == self.codebook[j] {
                    return bad(format!("codebook rows {i} and {j} coincide"));
                }
            }
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return bad("noise_std must be ≥ 0".into());
        }
        if self.jitter.is_empty() || self.frames_per_word == 0 {
            return bad("frames_per_word must be positive and jitter nonempty".into());
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("need 1 ≤ min_words ≤ max_words".into());
        }
        Ok(())
    }

    pub fn sample_words<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let n = rng.gen_range(self.min_words..=self.max_words);
        let mut out = Vec::with_capacity(n);
        let first = WeightedIndex::new(&self.initial).expect("valid initial distribution");
        out.push(first.sample(rng));
        while out.len() < n {
            let prev = *out.last().expect("nonempty");
            let dist = WeightedIndex::new(&self.transitions[prev]).expect("valid row");
            out.push(dist.sample(rng));
        }
        out
    }

    /// Number of frames for one word: `r + jitter`, at least one.
    fn duration<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let j = *self.jitter.choose(rng).expect("nonempty jitter");
        (self.frames_per_word as i64 + j).max(1) as usize
    }

    /// Renders a word sequence as `[T × feature_dim]` frames.
    pub fn render<R: Rng + ?Sized>(&self, words: &[usize], rng: &mut R) -> Tensor<f64> {
        let d = self.feature_dim();
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).expect("finite σ");
        let mut data = Vec::new();
        let mut frames = 0;
        for &w in words {
            for _ in 0..self.duration(rng) {
                for &c in &self.codebook[w] {
                    let n = if self.noise_std > 0.0 {
                        noise.sample(rng)
                    } else {
                        0.0
                    };
                    data.push(c + n);
                }
                frames += 1;
            }
        }
        Tensor::from_parts(vec![frames, d], data)
    }

    pub fn transcript(&self, words: &[usize]) -> String {
        words
            .iter()
            .map(|&w| self.words[w].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Deterministic utterance for a per-utterance seed.
    pub fn utterance(&self, seed: u64) -> (Vec<usize>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = self.sample_words(&mut rng);
        let feats = self.render(&words, &mut rng);
        (words, feats)
    }

    /// `<bos> w1 … wn <eos>` token sequences sampled from the grammar, for LM pretraining.
    pub fn text_corpus(&self, tok: &Tokenizer, n: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let words = self.sample_words(&mut rng);
                let mut ids = vec![BOS_ID];
                ids.extend(tok.tokenize(&self.transcript(&words)));
                ids.push(EOS_ID);
                ids
            })
            .collect()
    }

    /// Expected per-token accuracy of the Bayes-optimal next-token predictor
    /// on `<bos> w1 … wn <eos>` sequences, given the word-count position.
    pub fn bayes_accuracy(&self) -> f64 {
        let (lo, hi) = (self.min_words, self.max_words);
        let span = (hi - lo + 1) as f64;
        // P(n ≥ l) for a uniform length in [lo, hi]
        let survive = |l: usize| -> f64 {
            if l <= lo {
                1.0
            } else if l > hi {
                0.0
            } else {
                (hi - l + 1) as f64 / span
            }
        };
        // hazard of stopping right after l words
        let stop = |l: usize| -> f64 {
            if l < lo || l > hi {
                0.0
            } else {
                1.0 / (hi - l + 1) as f64
            }
        };
        let row_max: Vec<f64> = self
            .transitions
            .iter()
            .map(|r| r.iter().cloned().fold(0.0, f64::max))
            .collect();
        let v = self.vocab_size();
        let mut marginal = self.initial.clone();
        let mut correct = survive(0) * self.initial.iter().cloned().fold(0.0, f64::max);
        let mut positions = survive(0);
        for l in 1..=hi {
            let h = stop(l);
            let acc: f64 = (0..v)
                .map(|w| marginal[w] * h.max((1.0 - h) * row_max[w]))
                .sum();
            correct += survive(l) * acc;
            positions += survive(l);
            let mut next = vec![0.0; v];
            for (w, &pw) in marginal.iter().enumerate() {
                for (u, &t) in self.transitions[w].iter().enumerate() {
                    next[u] += pw * t;
                }
            }
            marginal = next;
        }
        correct / positions
    }
}

/// Utterance counts per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// What `gen-data --spec` reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default)]
    pub task: SynthParams,
    pub splits: SplitSizes,
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub task_path: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

pub const TASK_FILE: &str = "task.json";

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes `task.json`, one SLMF file per utterance under `feats/`, and
/// `train/val/test.jsonl` manifests with disjoint ids.
pub fn gen_dataset(
    spec: &SyntheticTaskSpec,
    sizes: SplitSizes,
    split_seed: u64,
    out: &Path,
) -> Result<GeneratedDataset> {
    let n = sizes.total();
    if n == 0 {
        return Err(Error::Empty("dataset needs at least one utterance".into()));
    }
    let feats_dir = out.join("feats");
    std::fs::create_dir_all(&feats_dir).map_err(|e| Error::io(&feats_dir, e))?;
    let task_path = out.join(TASK_FILE);
    let json = serde_json::to_string(spec).map_err(|e| Error::json(&task_path, e))?;
    std::fs::write(&task_path, json).map_err(|e| Error::io(&task_path, e))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));

    let records: Vec<Result<UtteranceRecord>> =
        crate::train::batch::ordered_map(&order, |_, &i| {
            let id = format!("utt{i:06}");
            let (words, feats) = spec.utterance(mix_seed(split_seed, i as u64));
            let rel = format!("feats/{id}.slmf");
            write_features(&out.join(&rel), &feats)?;
            Ok(UtteranceRecord {
                id,
                transcript: spec.transcript(&words),
                feature_path: Some(rel),
                synthetic_seed: None,
                num_frames: feats.shape()[0],
                frame_rate_hz: spec.frame_rate_hz,
                dim: spec.feature_dim(),
            })
        });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;

    let (train, rest) = records.split_at(sizes.train);
    let (val, test) = rest.split_at(sizes.val);
    let write = |name: &str, recs: &[UtteranceRecord]| -> Result<PathBuf> {
        let p = out.join(format!("{name}.jsonl"));
        Manifest {
            records: recs.to_vec(),
            base_dir: out.to_path_buf(),
        }
        .write(&p)?;
        Ok(p)
    };
    Ok(GeneratedDataset {
        task_path,
        train: write("train", train)?,
        val: write("val", val)?,
        test: write("test", test)?,
    })
}

pub fn load_task(path: &Path) -> Result<SyntheticTaskSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SyntheticTaskSpec = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    spec.validate()?;
    Ok(spec)
}
