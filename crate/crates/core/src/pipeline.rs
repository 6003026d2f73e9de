//! The assembled recognizer: frozen encoder → downsample → projector →
//! template → frozen LM, plus the per-utterance loss and decoding paths
//! shared by the trainer and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    compose, downsample, downsample_var, ComposeMode, ComposedSequence, ProjectorParams, Template,
};
use crate::autodiff::{Tape, Var};
use crate::data::features::read_features;
use crate::data::manifest::{FeatureSource, Manifest};
use crate::data::synth::SyntheticTaskSpec;
use crate::data::tokenizer::{Tokenizer, EOS_ID, IGNORE_ID};
use crate::decode::beam::{beam_search, log_softmax, Hypothesis, NextTokenModel};
use crate::error::{Error, Result};
use crate::nn::encoder::ToySpeechEncoder;
use crate::nn::lm::TinyCausalLm;
use crate::nn::Parameters;
use crate::tensor::{Element, Tensor};
use crate::train::batch::{ItemGrads, TokenStats};
use crate::train::metrics::masked_token_accuracy;

/// One utterance held in memory.
#[derive(Clone, Debug)]
pub struct Utterance<E: Element> {
    pub id: String,
    pub transcript: String,
    /// Raw frames `[T × input_dim]`, before the encoder.
    pub features: Tensor<E>,
}

/// Loads every record of `manifest`; synthetic records are rendered from `task`.
pub fn load_utterances<E: Element>(
    manifest: &Manifest,
    task: Option<&SyntheticTaskSpec>,
) -> Result<Vec<Utterance<E>>> {
    if manifest.is_empty() {
        return Err(Error::Empty("manifest has no utterances".into()));
    }
    let out: Vec<Result<Utterance<E>>> =
        crate::train::batch::ordered_map(&manifest.records, |_, r| {
            let features: Tensor<E> = match r.source(&manifest.base_dir)? {
                FeatureSource::File(p) => read_features(&p)?,
                FeatureSource::Synthetic(seed) => {
                    let task = task.ok_or_else(|| {
                        Error::Validation(format!(
                            "utterance {} is synthetic but no task spec was given",
                            r.id
                        ))
                    })?;
                    task.utterance(seed).1.cast()
                }
            };
            if features.shape() != [r.num_frames, r.dim] {
                return Err(Error::Validation(format!(
                    "utterance {}: manifest says {}x{}, features are {:?}",
                    r.id,
                    r.num_frames,
                    r.dim,
                    features.shape()
                )));
            }
            Ok(Utterance {
                id: r.id.clone(),
                transcript: r.transcript.clone(),
                features,
            })
        });
    out.into_iter().collect()
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Freeze {
    pub encoder: bool,
    pub lm: bool,
}

impl Default for Freeze {
    fn default() -> Self {
        Freeze {
            encoder: true,
            lm: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AsrModel<E: Element> {
    pub tokenizer: Tokenizer,
    pub template: Template,
    pub encoder: ToySpeechEncoder<E>,
    pub lm: TinyCausalLm<E>,
    pub projector: ProjectorParams<E>,
}

/// Tape handles for one bound model.
struct Bound {
    projector: crate::align::ProjectorVars,
    encoder: Option<crate::nn::encoder::EncoderVars>,
    lm: crate::nn::lm::LmVars,
}

/// Loss, statistics, and (optionally) gradients of one utterance.
pub struct ItemOutcome<E: Element> {
    pub composed: ComposedSequence,
    pub logits: Tensor<E>,
    pub grads: ItemGrads<E>,
}

impl<E: Element> AsrModel<E> {
    pub fn validate(&self) -> Result<()> {
        let p = &self.projector.config;
        if p.d_enc != self.encoder.output_dim {
            return Err(Error::config(
                "projector.d_enc",
                format!(
                    "{} but the encoder emits {}",
                    p.d_enc, self.encoder.output_dim
                ),
            ));
        }
        if p.d_llm != self.lm.config.model_dim {
            return Err(Error::config(
                "projector.d_llm",
                format!(
                    "{} but the LM width is {}",
                    p.d_llm, self.lm.config.model_dim
                ),
            ));
        }
        if self.tokenizer.vocab_size() > self.lm.config.vocab_size {
            return Err(Error::config(
                "lm.vocab_size",
                format!(
                    "{} is smaller than the tokenizer vocabulary {}",
                    self.lm.config.vocab_size,
                    self.tokenizer.vocab_size()
                ),
            ));
        }
        Ok(())
    }

    /// Named trainable tensors under `freeze`: projector, then encoder, then LM.
    pub fn trainable(&self, freeze: Freeze) -> Vec<(String, &Tensor<E>)> {
        let mut out = self.projector.named_params();
        if !freeze.encoder {
            out.extend(self.encoder.named_params());
        }
        if !freeze.lm {
            out.extend(
                self.lm
                    .named_params()
                    .into_iter()
                    .map(|(n, t)| (format!("lm.{n}"), t)),
            );
        }
        out
    }

    pub fn trainable_mut(&mut self, freeze: Freeze) -> Vec<&mut Tensor<E>> {
        let mut out = self.projector.params_mut();
        if !freeze.encoder {
            out.extend(self.encoder.params_mut());
        }
        if !freeze.lm {
            out.extend(self.lm.params_mut());
        }
        out
    }

    fn bind(&self, tape: &mut Tape<E>, freeze: Freeze, train: bool) -> Bound {
        Bound {
            projector: self.projector.bind(tape, train),
            encoder: self.encoder.bind(tape, train && !freeze.encoder),
            lm: self.lm.bind(tape, train && !freeze.lm),
        }
    }

    fn trainable_vars(&self, b: &Bound, freeze: Freeze) -> Vec<Var> {
        let mut out = b.projector.all();
        if !freeze.encoder {
            if let Some(e) = b.encoder {
                out.extend([e.weight, e.bias]);
            }
        }
        if !freeze.lm {
            out.extend(b.lm.all());
        }
        out
    }

    fn speech_var(&self, tape: &mut Tape<E>, b: &Bound, frames: &Tensor<E>) -> Result<Var> {
        let x = tape.constant(frames.clone());
        let h = self.encoder.encode(tape, b.encoder, x)?;
        let z = downsample_var(tape, h, self.projector.config.k)?;
        b.projector.forward(tape, z)
    }

    /// Projected speech rows `[N × d_llm]` for raw frames.
    pub fn speech_embeddings(&self, frames: &Tensor<E>) -> Result<Tensor<E>> {
        let h = self.encoder.encode_frames(frames)?;
        let z = downsample(&h, self.projector.config.k)?;
        self.projector.project(&z)
    }

    pub fn compose(
        &self,
        speech_rows: usize,
        prompt: &str,
        transcript: Option<&str>,
        mode: ComposeMode,
    ) -> Result<ComposedSequence> {
        compose(
            speech_rows,
            prompt,
            transcript,
            &self.tokenizer,
            &self.template,
            mode,
            self.lm.config.max_positions,
        )
    }

    /// Forward pass of one training example. With `backward` set, gradients
    /// of the summed transcript NLL are returned for the trainable tensors.
    pub fn item(
        &self,
        utt: &Utterance<E>,
        prompt: &str,
        freeze: Freeze,
        backward: bool,
    ) -> Result<ItemOutcome<E>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, freeze, backward);
        let speech = self.speech_var(&mut tape, &b, &utt.features)?;
        let n = tape.value(speech).shape()[0];
        let composed = self
            .compose(n, prompt, Some(&utt.transcript), ComposeMode::Train)
            .map_err(|e| match e {
                Error::EmptySpeech(m) => Error::EmptySpeech(format!("utterance {}: {m}", utt.id)),
                e => e,
            })?;
        let x = composed.assemble(&mut tape, &b.lm, speech)?;
        let logits = b.lm.forward(&mut tape, x)?;
        let ce = tape.cross_entropy(logits, &composed.targets, IGNORE_ID)?;
        let acc = masked_token_accuracy(tape.value(logits), &composed.targets, IGNORE_ID)?;
        let mean = tape.value(ce.loss).item().as_f64();
        let stats = TokenStats {
            nll_sum: mean * ce.supervised as f64,
            supervised: ce.supervised,
            correct: acc.correct,
        };
        let grads = if backward {
            let total = tape.scale(ce.loss, E::of(ce.supervised as f64));
            tape.backward(total)?;
            self.trainable_vars(&b, freeze)
                .into_iter()
                .map(|v| tape.grad(v))
                .collect()
        } else {
            Vec::new()
        };
        Ok(ItemOutcome {
            composed,
            logits: tape.value(logits).clone(),
            grads: ItemGrads { grads, stats },
        })
    }

    /// Token statistics over `utts`, each with the prompt `prompt_for(index)`.
    pub fn evaluate<'p>(
        &self,
        utts: &[Utterance<E>],
        prompt_for: impl Fn(usize) -> &'p str + Sync,
    ) -> Result<TokenStats> {
        let per = crate::train::batch::ordered_map(utts, |i, u| {
            self.item(u, prompt_for(i), Freeze::default(), false)
                .map(|o| o.grads.stats)
        });
        let mut total = TokenStats::default();
        for s in per {
            total.merge(&s?);
        }
        Ok(total)
    }

    /// Beam-search transcription of raw frames.
    pub fn transcribe(
        &self,
        frames: &Tensor<E>,
        prompt: &str,
        beam: usize,
        max_new: usize,
    ) -> Result<(String, Hypothesis)> {
        let speech = self.speech_embeddings(frames)?;
        let composed = self.compose(speech.shape()[0], prompt, None, ComposeMode::Infer)?;
        let prefix = composed.embeddings(&self.lm, &speech)?;
        let room = self.lm.config.max_positions - prefix.shape()[0];
        let model = PrefixedLm {
            lm: &self.lm,
            prefix,
        };
        let hyp = beam_search(&model, beam, max_new.min(room), EOS_ID)?;
        Ok((self.tokenizer.detokenize(hyp.content(EOS_ID)), hyp))
    }
}

/// A frozen LM conditioned on a fixed block of input embeddings.
pub struct PrefixedLm<'a, E: Element> {
    pub lm: &'a TinyCausalLm<E>,
    pub prefix: Tensor<E>,
}

impl<E: Element> NextTokenModel for PrefixedLm<'_, E> {
    fn vocab_size(&self) -> usize {
        self.lm.config.vocab_size
    }

    fn log_probs(&self, generated: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.lm.bind(&mut tape, false);
        let p = tape.constant(self.prefix.clone());
        let x = if generated.is_empty() {
            p
        } else {
            let g = vars.embed(&mut tape, generated)?;
            tape.concat_rows(&[p, g])?
        };
        let logits = vars.forward(&mut tape, x)?;
        let v = tape.value(logits);
        Ok(log_softmax(v.row(v.shape()[0] - 1)))
    }
}

/// Instruction-tuning corpus for the chat LM: `USER: w… <prompt> ASSISTANT: w… <eos>`.
/// Even examples copy a sentence drawn from `sentences`; odd ones copy
/// uniformly random words from `word_ids`, so the tuned model learns to copy
/// rather than merely continue the grammar.
pub fn copy_task_corpus(
    sentences: &[Vec<usize>],
    word_ids: &[usize],
    tok: &Tokenizer,
    template: &Template,
    prompts: &[String],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if sentences.is_empty() || word_ids.is_empty() {
        return Err(Error::Empty("copy-task source sentences".into()));
    }
    let min_len = sentences.iter().map(Vec::len).min().unwrap_or(1).max(1);
    let max_len = sentences
        .iter()
        .map(Vec::len)
        .max()
        .unwrap_or(1)
        .max(min_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user = tok.tokenize(&template.prefix);
    let tag = tok.tokenize(&template.assistant_tag);
    Ok((0..n)
        .map(|i| {
            let text: Vec<usize> = if i % 2 == 0 {
                sentences[rng.gen_range(0..sentences.len())].clone()
            } else {
                let len = rng.gen_range(min_len..=max_len);
                (0..len)
                    .map(|_| word_ids[rng.gen_range(0..word_ids.len())])
                    .collect()
            };
            let prompt = if prompts.is_empty() {
                Vec::new()
            } else {
                tok.tokenize(&prompts[rng.gen_range(0..prompts.len())])
            };
            let mut seq = user.clone();
            seq.extend(&text);
            seq.extend(prompt);
            seq.extend(&tag);
            seq.extend(&text);
            seq.push(EOS_ID);
            seq
        })
        .collect())
}
