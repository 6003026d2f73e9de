//! Projector training loop: AdamW with warmup, periodic validation, early
//! stopping on validation loss, best-checkpoint tracking, and resumable state.
//!
//! Batches and prompts for step `s` are derived from `(seed, s)` alone, so a
//! run resumed from saved state replays exactly what an uninterrupted run
//! would have done.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::synth::mix_seed;
use crate::decode::prompts::PromptLibrary;
use crate::error::{Error, Result};
use crate::pipeline::{AsrModel, Freeze, Utterance};
use crate::tensor::{Element, Tensor};
use crate::train::batch::batch_gradients;
use crate::train::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta, NamedTensors};
use crate::train::optim::{lr_at, AdamWConfig, OptimState};

const PROMPT_SALT: u64 = 0x70726f6d7074;
const VAL_SALT: u64 = 0x76616c;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const VAL_LOG: &str = "val_log.csv";
pub const BEST_PROJECTOR: &str = "projector.slmc";
pub const BEST_ENCODER: &str = "encoder.slmc";
pub const BEST_LM: &str = "lm_finetuned.slmc";
pub const STATE_FILE: &str = "state.slmc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_steps: u64,
    pub batch_size: usize,
    pub val_every: u64,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub freeze: Freeze,
    /// Validate on at most this many utterances.
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 100_000,
            batch_size: 4,
            val_every: 500,
            patience: 5,
            freeze: Freeze::default(),
            val_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.val_every == 0 {
            return Err(Error::config("train.val_every", "must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub masked_token_accuracy: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub val_step: u64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub val: Vec<ValRecord>,
}

impl TrainLog {
    /// Same records with wall-clock times zeroed, for determinism comparisons.
    pub fn without_wall_clock(&self) -> TrainLog {
        let mut t = self.clone();
        t.steps.iter_mut().for_each(|s| s.wall_ms = 0);
        t
    }

    pub fn write_csv(&self, dir: &Path, config_hash: &str) -> Result<()> {
        write_records(
            &dir.join(TRAIN_LOG),
            config_hash,
            TRAIN_LOG_HEADER,
            &self.steps,
        )?;
        write_records(&dir.join(VAL_LOG), config_hash, VAL_LOG_HEADER, &self.val)
    }

    pub fn read_csv(dir: &Path) -> Result<TrainLog> {
        Ok(TrainLog {
            steps: read_records(&dir.join(TRAIN_LOG))?,
            val: read_records(&dir.join(VAL_LOG))?,
        })
    }
}

pub const TRAIN_LOG_HEADER: &str = "step,loss,masked_token_accuracy,lr,wall_ms";
pub const VAL_LOG_HEADER: &str = "val_step,val_loss,val_accuracy";

/// CSV with a leading `# config_hash: …` comment line.
pub fn write_records<T: Serialize>(
    path: &Path,
    config_hash: &str,
    header: &str,
    rows: &[T],
) -> Result<()> {
    let mut buf = format!("# config_hash: {config_hash}\n{header}\n").into_bytes();
    {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            k => Error::Validation(format!("{}: {k:?}", path.display())),
        })?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Where and how the trainer writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainIo {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    /// Continue from a saved [`STATE_FILE`].
    pub resume: Option<PathBuf>,
    /// Save state and return once this step has completed.
    pub halt_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub last_step: u64,
    pub best_step: u64,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub halted: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ResumeState {
    step: u64,
    best_step: u64,
    best_val_loss: f64,
    bad_validations: usize,
    log: TrainLog,
}

/// Per-step batch: indices into the training set and one prompt per item.
pub fn batch_plan(
    seed: u64,
    step: u64,
    n_train: usize,
    batch: usize,
    prompts: &PromptLibrary,
) -> Vec<(usize, &str)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, step));
    (0..batch)
        .map(|i| {
            let idx = rng.gen_range(0..n_train);
            let p = prompts.sample_seeded(mix_seed(mix_seed(seed ^ PROMPT_SALT, step), i as u64));
            (idx, p)
        })
        .collect()
}

/// Prompt used for validation utterance `i`.
pub fn val_prompt(prompts: &PromptLibrary, seed: u64, i: usize) -> &str {
    prompts.sample_seeded(mix_seed(seed ^ VAL_SALT, i as u64))
}

fn snapshot<E: Element>(model: &AsrModel<E>, freeze: Freeze) -> NamedTensors<E> {
    model
        .trainable(freeze)
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect()
}

fn restore<E: Element>(
    model: &mut AsrModel<E>,
    freeze: Freeze,
    named: &[(String, Tensor<E>)],
) -> Result<()> {
    let slots = model.trainable_mut(freeze);
    if slots.len() != named.len() {
        return Err(Error::Validation(format!(
            "saved state has {} tensors, model expects {}",
            named.len(),
            slots.len()
        )));
    }
    for (slot, (name, t)) in slots.into_iter().zip(named) {
        if slot.shape() != t.shape() {
            return Err(Error::Validation(format!(
                "saved {name} has shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(())
}

fn take_prefixed<E: Element>(named: &NamedTensors<E>, prefix: &str) -> NamedTensors<E> {
    named
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect()
}

/// Trains `model` in place and leaves it holding the best-validation
/// parameters. Artifacts land in `io.out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn train_projector<E: Element>(
    model: &mut AsrModel<E>,
    train: &[Utterance<E>],
    val: &[Utterance<E>],
    prompts: &PromptLibrary,
    cfg: &TrainConfig,
    opt_cfg: AdamWConfig,
    io: &TrainIo,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training manifest".into()));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation manifest".into()));
    }
    std::fs::create_dir_all(&io.out_dir).map_err(|e| Error::io(&io.out_dir, e))?;
    let val = &val[..cfg.val_limit.unwrap_or(val.len()).min(val.len()).max(1)];
    let freeze = cfg.freeze;
    let shapes: Vec<Vec<usize>> = model
        .trainable(freeze)
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let names: Vec<String> = model
        .trainable(freeze)
        .into_iter()
        .map(|(n, _)| n)
        .collect();

    let mut opt = {
        let params: Vec<&Tensor<E>> = model
            .trainable(freeze)
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        OptimState::new(opt_cfg, &params)
    };
    let mut st = ResumeState {
        step: 0,
        best_step: 0,
        best_val_loss: f64::INFINITY,
        bad_validations: 0,
        log: TrainLog::default(),
    };
    let mut best = snapshot(model, freeze);
    let started = Instant::now();

    let validate = |model: &AsrModel<E>| -> Result<ValRecord> {
        let stats = model.evaluate(val, |i| val_prompt(prompts, io.seed, i))?;
        Ok(ValRecord {
            val_step: 0,
            val_loss: stats.mean_loss(),
            val_accuracy: stats.accuracy(),
        })
    };

    if let Some(path) = &io.resume {
        let (named, meta) = read_checkpoint::<E>(path)?;
        if meta.kind != "train_state" {
            return Err(Error::Validation(format!(
                "{} is not a training state",
                path.display()
            )));
        }
        st = serde_json::from_value(meta.model).map_err(|e| Error::json(path, e))?;
        restore(model, freeze, &take_prefixed(&named, "param/"))?;
        best = take_prefixed(&named, "best/");
        opt.m = take_prefixed(&named, "adam_m/")
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        opt.v = take_prefixed(&named, "adam_v/")
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        opt.step = st.step;
        if best.len() != names.len() || opt.m.len() != names.len() || opt.v.len() != names.len() {
            return Err(Error::Validation(format!(
                "{} does not match the trainable set",
                path.display()
            )));
        }
    } else {
        let rec = validate(model)?;
        log::info!(
            "step 0: val loss {:.4} acc {:.3}",
            rec.val_loss,
            rec.val_accuracy
        );
        st.best_val_loss = rec.val_loss;
        st.log.val.push(rec);
    }

    let mut stopped_early = false;
    let mut halted = false;
    while st.step < cfg.max_steps {
        let step = st.step + 1;
        let plan = batch_plan(io.seed, step, train.len(), cfg.batch_size, prompts);
        let (grads, stats) = {
            let m: &AsrModel<E> = model;
            batch_gradients(&plan, &shapes, |(i, p)| {
                m.item(&train[*i], p, freeze, true).map(|o| o.grads)
            })?
        };
        let loss = stats.mean_loss();
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: format!("training loss {loss}"),
            });
        }
        let lr = lr_at(step, opt_cfg.warmup_steps, opt_cfg.lr_max);
        opt.step(&mut model.trainable_mut(freeze), &grads, lr)?;
        st.step = step;
        st.log.steps.push(StepRecord {
            step,
            loss,
            masked_token_accuracy: stats.accuracy(),
            lr,
            wall_ms: started.elapsed().as_millis() as u64,
        });

        let at_end = step == cfg.max_steps;
        if step.is_multiple_of(cfg.val_every) || at_end {
            let mut rec = validate(model)?;
            rec.val_step = step;
            log::info!(
                "step {step}: loss {loss:.4} acc {:.3} | val loss {:.4} acc {:.3}",
                stats.accuracy(),
                rec.val_loss,
                rec.val_accuracy
            );
            if rec.val_loss < st.best_val_loss {
                st.best_val_loss = rec.val_loss;
                st.best_step = step;
                st.bad_validations = 0;
                best = snapshot(model, freeze);
            } else {
                st.bad_validations += 1;
            }
            st.log.val.push(rec);
            if st.bad_validations >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
        if io.halt_after == Some(step) && !at_end {
            halted = true;
            break;
        }
    }

    if halted {
        let mut named: Vec<(String, &Tensor<E>)> = Vec::new();
        let current = model.trainable(freeze);
        for (n, t) in &current {
            named.push((format!("param/{n}"), t));
        }
        for (n, t) in &best {
            named.push((format!("best/{n}"), t));
        }
        for (n, t) in names.iter().zip(&opt.m) {
            named.push((format!("adam_m/{n}"), t));
        }
        for (n, t) in names.iter().zip(&opt.v) {
            named.push((format!("adam_v/{n}"), t));
        }
        let meta = CheckpointMeta {
            kind: "train_state".into(),
            step: st.step,
            val_loss: Some(st.best_val_loss),
            config_hash: io.config_hash.clone(),
            seed: io.seed,
            model: serde_json::to_value(&st).map_err(|e| Error::json(&io.out_dir, e))?,
        };
        write_checkpoint(&io.out_dir.join(STATE_FILE), &named, &meta)?;
    } else {
        restore(model, freeze, &best)?;
        write_best(model, freeze, st.best_step, st.best_val_loss, io)?;
    }
    st.log.write_csv(&io.out_dir, &io.config_hash)?;
    Ok(TrainOutcome {
        log: st.log,
        last_step: st.step,
        best_step: st.best_step,
        best_val_loss: st.best_val_loss,
        stopped_early,
        halted,
    })
}

fn write_best<E: Element>(
    model: &AsrModel<E>,
    freeze: Freeze,
    step: u64,
    val_loss: f64,
    io: &TrainIo,
) -> Result<()> {
    use crate::nn::Parameters;
    let meta = |kind: &str, m: serde_json::Value| CheckpointMeta {
        kind: kind.into(),
        step,
        val_loss: Some(val_loss),
        config_hash: io.config_hash.clone(),
        seed: io.seed,
        model: m,
    };
    let pm =
        serde_json::to_value(model.projector.config).map_err(|e| Error::json(&io.out_dir, e))?;
    write_checkpoint(
        &io.out_dir.join(BEST_PROJECTOR),
        &model.projector.named_params(),
        &meta("projector", pm),
    )?;
    if !freeze.encoder {
        let em = serde_json::json!({
            "mode": model.encoder.mode,
            "input_dim": model.encoder.input_dim,
            "output_dim": model.encoder.output_dim,
            "frame_rate_hz": model.encoder.frame_rate_hz,
        });
        write_checkpoint(
            &io.out_dir.join(BEST_ENCODER),
            &model.encoder.named_params(),
            &meta("encoder", em),
        )?;
    }
    if !freeze.lm {
        let lm = serde_json::json!({ "config": model.lm.config });
        write_checkpoint(
            &io.out_dir.join(BEST_LM),
            &model.lm.named_params(),
            &meta("lm", lm),
        )?;
    }
    Ok(())
}
