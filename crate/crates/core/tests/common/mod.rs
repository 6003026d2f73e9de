//! Shared helpers for the integration tests: independent oracles, a
//! finite-difference checker, and small model builders.

#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use asr_align::align::{ProjectorConfig, ProjectorParams, Template};
use asr_align::data::tokenizer::Tokenizer;
use asr_align::nn::encoder::ToySpeechEncoder;
use asr_align::nn::lm::{LmConfig, TinyCausalLm};
use asr_align::pipeline::{AsrModel, Utterance};
use asr_align::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: [&str; 6] = ["red", "green", "blue", "cat", "dog", "sun"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A deliberately small recognizer: identity or affine encoder over `d_enc`
/// features, LM width 8, one layer, two heads.
pub fn tiny_model(seed: u64, d_enc: usize, k: usize, affine: bool) -> AsrModel<f64> {
    let mut words: Vec<String> = WORDS.iter().map(|s| s.to_string()).collect();
    words.push("transcribe".into());
    let tokenizer = Tokenizer::new(words);
    let lm = TinyCausalLm::init(
        LmConfig {
            vocab_size: tokenizer.vocab_size(),
            model_dim: 8,
            num_layers: 1,
            num_heads: 2,
            max_positions: 64,
            mlp_dim: 12,
        },
        seed,
    )
    .unwrap();
    let encoder = if affine {
        ToySpeechEncoder::affine(d_enc, d_enc, 50.0, seed + 1)
    } else {
        ToySpeechEncoder::identity(d_enc, 50.0)
    };
    let projector = ProjectorParams::init(
        ProjectorConfig {
            k,
            d_enc,
            d_hidden: 6,
            d_llm: 8,
        },
        seed + 2,
    )
    .unwrap();
    AsrModel {
        tokenizer,
        template: Template::default(),
        encoder,
        lm,
        projector,
    }
}

/// A random utterance of `words` words over [`WORDS`] with `frames` frames.
pub fn tiny_utterance(seed: u64, words: usize, frames: usize, d: usize) -> Utterance<f64> {
    let mut r = rng(seed);
    let transcript: Vec<&str> = (0..words)
        .map(|_| WORDS[r.gen_range(0..WORDS.len())])
        .collect();
    Utterance {
        id: format!("u{seed}"),
        transcript: transcript.join(" "),
        features: Tensor::randn(&[frames, d], 1.0, &mut r),
    }
}

/// `n` utterances of 1 to 3 words, 4 to 9 frames each.
pub fn tiny_set(seed: u64, n: usize, d: usize) -> Vec<Utterance<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let words = r.gen_range(1..4);
            let frames = r.gen_range(4..10);
            tiny_utterance(seed * 1000 + i as u64, words, frames, d)
        })
        .collect()
}

pub fn train_io(dir: &std::path::Path) -> asr_align::train::projector::TrainIo {
    asr_align::train::projector::TrainIo {
        out_dir: dir.to_path_buf(),
        config_hash: "test".into(),
        seed: 7,
        resume: None,
        halt_after: None,
    }
}
