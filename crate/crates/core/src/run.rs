//! End-to-end workflows driven by a [`RunConfig`]; the CLI subcommands are
//! thin wrappers around these.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{ProjectorConfig, ProjectorParams, Template};
use crate::config::{EncoderSection, LmVariant, RunConfig};
use crate::data::manifest::Manifest;
use crate::data::synth::{load_task, SyntheticTaskSpec, TASK_FILE};
use crate::data::tokenizer::{normalize, Tokenizer, BOS_ID, EOS_ID};
use crate::decode::beam::greedy;
use crate::decode::ppl::{lm_text_ppl, word_ppl};
use crate::decode::prompts::{PromptMode, DEFAULT_LIBRARY};
use crate::decode::report::{score_files, write_json, HypothesisFile, HypothesisRecord};
use crate::error::{Error, Result};
use crate::nn::encoder::{EncoderMode, ToySpeechEncoder};
use crate::nn::lm::{LmConfig, TinyCausalLm};
use crate::nn::pretrain::{instruction_tune, pretrain_lm, LmTrainReport};
use crate::nn::Parameters;
use crate::pipeline::{copy_task_corpus, load_utterances, AsrModel, PrefixedLm, Utterance};
use crate::tensor::{Element, Tensor};
use crate::train::batch::ordered_map;
use crate::train::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use crate::train::projector::{
    train_projector, val_prompt, write_records, TrainIo, TrainOutcome, BEST_ENCODER, BEST_LM,
    BEST_PROJECTOR,
};

pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const BASE_LM_FILE: &str = "base_lm.slmc";
pub const CHAT_LM_FILE: &str = "chat_lm.slmc";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config("split", format!("unknown split {s:?}"))),
        }
    }
}

pub fn manifest_path(cfg: &RunConfig, split: Split) -> PathBuf {
    cfg.paths.data_dir.join(format!("{}.jsonl", split.name()))
}

/// The synthetic task spec, when the data directory has one.
pub fn task_of(cfg: &RunConfig) -> Result<Option<SyntheticTaskSpec>> {
    let p = cfg.paths.data_dir.join(TASK_FILE);
    if p.exists() {
        load_task(&p).map(Some)
    } else {
        Ok(None)
    }
}

pub fn load_split<E: Element>(cfg: &RunConfig, split: Split) -> Result<Vec<Utterance<E>>> {
    let m = Manifest::read(&manifest_path(cfg, split))?;
    m.validate_features()?;
    load_utterances(&m, task_of(cfg)?.as_ref())
}

/// Every prompt the run may draw, for vocabulary construction.
fn prompt_texts(mode: &PromptMode) -> Result<Vec<String>> {
    let mut out: Vec<String> = DEFAULT_LIBRARY.iter().map(|s| s.to_string()).collect();
    out.extend(mode.library()?.prompts().iter().cloned());
    Ok(out)
}

/// Task words (or training transcripts), prompts, and template markers.
pub fn build_tokenizer(cfg: &RunConfig) -> Result<Tokenizer> {
    let mut texts: Vec<String> = match task_of(cfg)? {
        Some(t) => t.words.clone(),
        None => Manifest::read(&manifest_path(cfg, Split::Train))?
            .records
            .into_iter()
            .map(|r| r.transcript)
            .collect(),
    };
    texts.extend(prompt_texts(&cfg.prompt)?);
    Ok(Tokenizer::new(texts))
}

pub fn lm_config(cfg: &RunConfig, vocab_size: usize) -> LmConfig {
    LmConfig {
        vocab_size,
        model_dim: cfg.lm.model_dim,
        num_layers: cfg.lm.num_layers,
        num_heads: cfg.lm.num_heads,
        max_positions: cfg.lm.max_positions,
        mlp_dim: cfg.lm.mlp_dim,
    }
}

/// Word-id sentences (no specials) used to train the LMs.
fn lm_sentences(cfg: &RunConfig, tok: &Tokenizer, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    Ok(match task_of(cfg)? {
        Some(task) => task
            .text_corpus(tok, n, seed)
            .into_iter()
            .map(|s| s[1..s.len() - 1].to_vec())
            .collect(),
        None => Manifest::read(&manifest_path(cfg, Split::Train))?
            .records
            .iter()
            .map(|r| tok.tokenize(&r.transcript))
            .collect(),
    })
}

pub fn save_lm<E: Element>(
    path: &Path,
    lm: &TinyCausalLm<E>,
    cfg: &RunConfig,
    report: &LmTrainReport,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "lm".into(),
        step: report.steps,
        val_loss: Some(report.heldout_loss),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        model: serde_json::json!({ "config": lm.config, "report": report }),
    };
    write_checkpoint(path, &lm.named_params(), &meta)
}

pub fn load_lm<E: Element>(path: &Path) -> Result<TinyCausalLm<E>> {
    let (named, meta) = read_checkpoint::<E>(path)?;
    let config: LmConfig = serde_json::from_value(meta.model["config"].clone())
        .map_err(|e| Error::json(crate::train::checkpoint::sidecar_path(path), e))?;
    TinyCausalLm::from_named(config, &named)
}

/// Trains the base LM on the grammar (or transcripts) and writes it with the tokenizer.
pub fn run_pretrain_lm<E: Element>(cfg: &RunConfig) -> Result<LmTrainReport> {
    let tok = build_tokenizer(cfg)?;
    let corpus: Vec<Vec<usize>> = lm_sentences(cfg, &tok, cfg.lm.pretrain_corpus, cfg.seed)?
        .into_iter()
        .map(|s| {
            let mut seq = vec![BOS_ID];
            seq.extend(s);
            seq.push(EOS_ID);
            seq
        })
        .collect();
    let (lm, report) = pretrain_lm::<E>(
        &corpus,
        lm_config(cfg, tok.vocab_size()),
        cfg.lm.init_seed,
        &cfg.lm.pretrain,
    )?;
    std::fs::create_dir_all(&cfg.paths.lm_dir).map_err(|e| Error::io(&cfg.paths.lm_dir, e))?;
    tok.save(&cfg.paths.lm_dir.join(TOKENIZER_FILE))?;
    save_lm(&cfg.paths.lm_dir.join(BASE_LM_FILE), &lm, cfg, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstructReport {
    pub train: LmTrainReport,
    /// Greedy exact-match rate on held-out copy prompts.
    pub copy_exact_match: f64,
    pub base_copy_exact_match: f64,
}

/// Instruction-format prompts: the empty prompt plus every library prompt.
fn instruct_prompts(cfg: &RunConfig) -> Result<Vec<String>> {
    let mut p = vec![String::new()];
    p.extend(prompt_texts(&cfg.prompt)?);
    Ok(p)
}

fn copy_corpus(cfg: &RunConfig, tok: &Tokenizer, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let sentences = lm_sentences(cfg, tok, n.max(1), seed)?;
    let mut word_ids: Vec<usize> = sentences.iter().flatten().copied().collect();
    word_ids.sort_unstable();
    word_ids.dedup();
    copy_task_corpus(
        &sentences,
        &word_ids,
        tok,
        &Template::default(),
        &instruct_prompts(cfg)?,
        n,
        seed ^ 0x636f7079,
    )
}

/// Fraction of copy prompts `USER: x <p> ASSISTANT:` greedily completed with exactly `x <eos>`.
pub fn copy_exact_match<E: Element>(
    lm: &TinyCausalLm<E>,
    tok: &Tokenizer,
    corpus: &[Vec<usize>],
) -> Result<f64> {
    let a = tok.assistant_id();
    let hits: Vec<Result<bool>> = ordered_map(corpus, |_, seq| {
        let cut = seq
            .iter()
            .position(|&t| t == a)
            .expect("copy corpus has the tag")
            + 1;
        let ids = &seq[..cut];
        let table = lm.tok_emb.clone();
        let prefix = Tensor::new(
            vec![ids.len(), table.shape()[1]],
            ids.iter().flat_map(|&i| table.row(i).to_vec()).collect(),
        )?;
        let m = PrefixedLm { lm, prefix };
        let h = greedy(&m, seq.len() - cut + 2, EOS_ID)?;
        Ok(h.tokens == seq[cut..])
    });
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / corpus.len().max(1) as f64)
}

pub fn run_instruction_tune<E: Element>(cfg: &RunConfig) -> Result<InstructReport> {
    let tok = Tokenizer::load(&cfg.paths.lm_dir.join(TOKENIZER_FILE))?;
    let base = load_lm::<E>(&cfg.paths.lm_dir.join(BASE_LM_FILE))?;
    let corpus = copy_corpus(cfg, &tok, cfg.lm.instruct_corpus, cfg.seed.wrapping_add(1))?;
    let (chat, report) = instruction_tune(
        &base,
        &corpus,
        tok.user_id(),
        tok.assistant_id(),
        &cfg.lm.instruct,
    )?;
    let held = copy_corpus(cfg, &tok, 200, cfg.seed.wrapping_add(2))?;
    let out = InstructReport {
        copy_exact_match: copy_exact_match(&chat, &tok, &held)?,
        base_copy_exact_match: copy_exact_match(&base, &tok, &held)?,
        train: report,
    };
    save_lm(&cfg.paths.lm_dir.join(CHAT_LM_FILE), &chat, cfg, &out.train)?;
    Ok(out)
}

pub fn lm_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.lm_dir.join(match cfg.lm.variant {
        LmVariant::Base => BASE_LM_FILE,
        LmVariant::Chat => CHAT_LM_FILE,
    })
}

/// Assembles the recognizer. With `trained` the projector (and a fine-tuned
/// encoder, if any) come from the output directory; otherwise the projector
/// is freshly initialized.
pub fn build_model<E: Element>(cfg: &RunConfig, trained: bool) -> Result<AsrModel<E>> {
    let tokenizer = Tokenizer::load(&cfg.paths.lm_dir.join(TOKENIZER_FILE))?;
    let lm = if trained && !cfg.train.freeze.lm {
        load_lm::<E>(&cfg.paths.out_dir.join(BEST_LM))?
    } else {
        load_lm::<E>(&lm_path(cfg))?
    };
    let feat = Manifest::read(&manifest_path(cfg, Split::Train))?;
    let first = feat
        .records
        .first()
        .ok_or_else(|| Error::Empty("training manifest".into()))?;
    let (d_in, rate) = (first.dim, first.frame_rate_hz);
    let mut encoder = match cfg.encoder.mode {
        EncoderMode::Identity => {
            if cfg.encoder.output_dim.is_some_and(|d| d != d_in) {
                return Err(Error::config(
                    "encoder.output_dim",
                    "identity mode keeps the feature width",
                ));
            }
            ToySpeechEncoder::identity(d_in, rate)
        }
        EncoderMode::Affine => ToySpeechEncoder::affine(
            d_in,
            cfg.encoder.output_dim.unwrap_or(d_in),
            rate,
            cfg.encoder.seed,
        ),
    };
    let pcfg = ProjectorConfig {
        k: cfg.projector.k,
        d_enc: encoder.output_dim,
        d_hidden: cfg.projector.d_hidden,
        d_llm: lm.config.model_dim,
    };
    let projector = if trained {
        let p = cfg.paths.out_dir.join(BEST_PROJECTOR);
        let (named, _) = read_checkpoint::<E>(&p)?;
        if !cfg.train.freeze.encoder && encoder.mode == EncoderMode::Affine {
            let (en, _) = read_checkpoint::<E>(&cfg.paths.out_dir.join(BEST_ENCODER))?;
            encoder = ToySpeechEncoder::from_named(
                encoder.mode,
                encoder.input_dim,
                encoder.output_dim,
                rate,
                &en,
            )?;
        }
        ProjectorParams::from_named(pcfg, &named)?
    } else {
        ProjectorParams::init(pcfg, cfg.projector.init_seed)?
    };
    let model = AsrModel {
        tokenizer,
        template: Template::default(),
        encoder,
        lm,
        projector,
    };
    model.validate()?;
    Ok(model)
}

pub fn run_train_projector<E: Element>(
    cfg: &RunConfig,
    resume: Option<PathBuf>,
    halt_after: Option<u64>,
) -> Result<(AsrModel<E>, TrainOutcome)> {
    let mut model = build_model::<E>(cfg, false)?;
    let train = load_split::<E>(cfg, Split::Train)?;
    let val = load_split::<E>(cfg, Split::Val)?;
    let prompts = cfg.prompt.library()?;
    let io = TrainIo {
        out_dir: cfg.paths.out_dir.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        resume,
        halt_after,
    };
    let outcome = train_projector(
        &mut model,
        &train,
        &val,
        &prompts,
        &cfg.train,
        cfg.optimizer,
        &io,
    )?;
    Ok((model, outcome))
}

/// Beam-decodes every utterance of `utts`; the prompt for utterance `i` is
/// the same one validation would use.
pub fn decode_utterances<E: Element>(
    model: &AsrModel<E>,
    cfg: &RunConfig,
    utts: &[Utterance<E>],
) -> Result<HypothesisFile> {
    let prompts = cfg.prompt.library()?;
    let hyps: Vec<Result<HypothesisRecord>> = ordered_map(utts, |i, u| {
        let p = val_prompt(&prompts, cfg.seed, i);
        let (text, h) = model.transcribe(&u.features, p, cfg.decode.beam, cfg.decode.max_new)?;
        Ok(HypothesisRecord {
            id: u.id.clone(),
            hyp: text,
            log_prob: h.log_prob,
            truncated: h.truncated,
        })
    });
    Ok(HypothesisFile {
        config_hash: cfg.hash(),
        hypotheses: hyps.into_iter().collect::<Result<_>>()?,
    })
}

pub fn hyps_path(cfg: &RunConfig, split: Split) -> PathBuf {
    cfg.paths
        .out_dir
        .join(format!("hyps_{}.json", split.name()))
}

pub fn run_decode<E: Element>(cfg: &RunConfig, split: Split) -> Result<HypothesisFile> {
    let model = build_model::<E>(cfg, true)?;
    let utts = load_split::<E>(cfg, split)?;
    let hyps = decode_utterances(&model, cfg, &utts)?;
    std::fs::create_dir_all(&cfg.paths.out_dir).map_err(|e| Error::io(&cfg.paths.out_dir, e))?;
    hyps.write(&hyps_path(cfg, split))?;
    Ok(hyps)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PplReport {
    pub config_hash: String,
    pub split: String,
    pub words: usize,
    /// Transcript perplexity given the speech and prompt, per word.
    pub speech_conditioned_ppl: f64,
    /// Text-only perplexity of the LM on the transcripts, per word.
    pub text_ppl: f64,
}

pub fn run_ppl<E: Element>(cfg: &RunConfig, split: Split) -> Result<PplReport> {
    let model = build_model::<E>(cfg, true)?;
    let utts = load_split::<E>(cfg, split)?;
    let prompts = cfg.prompt.library()?;
    let stats = model.evaluate(&utts, |i| val_prompt(&prompts, cfg.seed, i))?;
    let texts: Vec<String> = utts.iter().map(|u| normalize(&u.transcript)).collect();
    let words = texts.iter().map(|t| t.split_whitespace().count()).sum();
    Ok(PplReport {
        config_hash: cfg.hash(),
        split: split.name().into(),
        words,
        speech_conditioned_ppl: word_ppl(stats.nll_sum, stats.supervised, words)?,
        text_ppl: lm_text_ppl(&model.lm, &model.tokenizer, &texts)?,
    })
}

/// One encoder arm of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderVariant {
    pub name: String,
    pub encoder: EncoderSection,
    #[serde(default = "yes")]
    pub freeze: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptVariant {
    pub name: String,
    pub prompt: PromptMode,
}

/// What `sweep --grid` reads: a base config plus the axes to cross.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    /// Path of the base run config, relative to the grid file.
    pub base: PathBuf,
    pub encoders: Vec<EncoderVariant>,
    pub lms: Vec<LmVariant>,
    pub prompts: Vec<PromptVariant>,
}

impl SweepGrid {
    pub fn load(path: &Path) -> Result<(Self, RunConfig)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grid: SweepGrid = serde_json::from_str(&text).map_err(|e| Error::Config {
            field: "<grid>".into(),
            msg: e.to_string(),
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let base = RunConfig::load(&dir.join(&grid.base))?;
        if grid.encoders.is_empty() || grid.lms.is_empty() || grid.prompts.is_empty() {
            return Err(Error::config("grid", "every axis needs at least one entry"));
        }
        Ok((grid, base))
    }

    /// Run name and config for every cell, encoder-major.
    pub fn cells(&self, base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
        let mut out = Vec::new();
        for e in &self.encoders {
            for &l in &self.lms {
                for p in &self.prompts {
                    let lm_name = match l {
                        LmVariant::Base => "base",
                        LmVariant::Chat => "chat",
                    };
                    let name = format!("{}__{}__{}", e.name, lm_name, p.name);
                    let mut c = base.clone();
                    c.encoder = e.encoder.clone();
                    c.train.freeze.encoder = e.freeze;
                    c.lm.variant = l;
                    c.prompt = p.prompt.clone();
                    c.paths.out_dir = base.paths.out_dir.join("sweep").join(&name);
                    c.validate()?;
                    out.push((name, c));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: String,
    pub encoder: String,
    pub lm: String,
    pub prompt: String,
    pub config_hash: String,
    pub best_step: u64,
    pub best_val_loss: f64,
    pub test_wer: f64,
}

pub const SWEEP_SUMMARY: &str = "sweep_summary.csv";

/// Trains the LMs if they are missing, then trains, decodes and scores every
/// cell in turn. The summary lands in the base output directory.
pub fn run_sweep<E: Element>(grid: &SweepGrid, base: &RunConfig) -> Result<Vec<SweepRow>> {
    if !cfg_has_lms(base) {
        run_pretrain_lm::<E>(base)?;
        run_instruction_tune::<E>(base)?;
    }
    let cells = grid.cells(base)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (name, cfg) in &cells {
        log::info!("sweep cell {name}");
        let (model, outcome) = run_train_projector::<E>(cfg, None, None)?;
        let utts = load_split::<E>(cfg, Split::Test)?;
        let hyps = decode_utterances(&model, cfg, &utts)?;
        hyps.write(&hyps_path(cfg, Split::Test))?;
        let refs = Manifest::read(&manifest_path(cfg, Split::Test))?;
        let score = score_files(&refs, &hyps)?;
        write_json(
            &cfg.paths
                .out_dir
                .join(format!("wer_{}.json", Split::Test.name())),
            &score,
        )?;
        let mut parts = name.split("__");
        let mut next = || parts.next().unwrap_or_default().to_string();
        rows.push(SweepRow {
            run: name.clone(),
            encoder: next(),
            lm: next(),
            prompt: next(),
            config_hash: cfg.hash(),
            best_step: outcome.best_step,
            best_val_loss: outcome.best_val_loss,
            test_wer: score.corpus_wer,
        });
    }
    let header = "run,encoder,lm,prompt,config_hash,best_step,best_val_loss,test_wer";
    write_records(
        &base.paths.out_dir.join(SWEEP_SUMMARY),
        &base.hash(),
        header,
        &rows,
    )?;
    Ok(rows)
}

fn cfg_has_lms(cfg: &RunConfig) -> bool {
    let d = &cfg.paths.lm_dir;
    d.join(TOKENIZER_FILE).exists()
        && d.join(BASE_LM_FILE).exists()
        && d.join(CHAT_LM_FILE).exists()
}
