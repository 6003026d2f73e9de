use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use asr_align::config::RunConfig;
use asr_align::data::manifest::Manifest;
use asr_align::data::synth::{gen_dataset, DatasetSpec, SyntheticTaskSpec};
use asr_align::decode::report::{score_files, write_json, HypothesisFile};
use asr_align::nn::pretrain::LmTrainReport;
use asr_align::run::{self, Split, SweepGrid};
use asr_align::train::curves::emit_curves;
use asr_align::{DType, Error};
use clap::{Parser, Subcommand};

/// Align a frozen speech encoder to a frozen causal LM through a trainable
/// projector, and evaluate the result.
///
/// Exit codes: 0 success, 1 runtime failure, 2 invalid config or usage.
/// SLAM_ASR_THREADS caps worker threads; RUST_LOG sets verbosity.
#[derive(Parser)]
#[command(name = "asr-align", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (features, manifests, task description).
    GenData {
        /// Dataset spec JSON: task parameters, split sizes, split seed.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base LM and write it with the tokenizer.
    PretrainLm {
        #[arg(long)]
        config: PathBuf,
    },
    /// Instruction-tune the base LM into the chat LM.
    InstructionTune {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the projector; writes checkpoints and train/val CSV logs.
    TrainProjector {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this step and save a resumable state.
        #[arg(long)]
        halt_after: Option<u64>,
    },
    /// Beam-decode a split with the trained projector.
    Decode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score hypotheses against a manifest.
    Score {
        /// Reference manifest (JSONL).
        #[arg(long)]
        refs: PathBuf,
        /// Hypotheses JSON written by `decode`.
        #[arg(long)]
        hyps: PathBuf,
        /// Where to write the report JSON (default: beside the hypotheses).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Word-level perplexity of a split's transcripts.
    Ppl {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run every encoder x LM x prompt combination in a grid.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Draw loss/accuracy curves from a log CSV.
    EmitCurves {
        /// Log CSV from `train-projector`.
        #[arg(long)]
        log: PathBuf,
        /// SVG output; a copy of the CSV is written beside it.
        #[arg(long)]
        out: PathBuf,
    },
}

macro_rules! with_precision {
    ($cfg:expr, $f:ident ( $($arg:expr),* )) => {
        match $cfg.precision {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn write_report<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_json(path, value)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn execute(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let ds: DatasetSpec = serde_json::from_str(&text).map_err(|e| Error::Config {
                field: "<document>".into(),
                msg: e.to_string(),
            })?;
            let task = SyntheticTaskSpec::from_params(&ds.task)?;
            let g = gen_dataset(&task, ds.splits, ds.split_seed, &out)?;
            println!(
                "wrote {} and {} utterances",
                g.task_path.display(),
                ds.splits.total()
            );
        }
        Cmd::PretrainLm { config } => {
            let cfg = load_config(&config)?;
            let r = with_precision!(cfg, pretrain(&cfg))?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Cmd::InstructionTune { config } => {
            let cfg = load_config(&config)?;
            let r = with_precision!(cfg, instruct(&cfg))?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Cmd::TrainProjector {
            config,
            resume,
            halt_after,
        } => {
            let cfg = load_config(&config)?;
            with_precision!(cfg, train(&cfg, resume, halt_after))?;
        }
        Cmd::Decode { config, split } => {
            let cfg = load_config(&config)?;
            let split = Split::parse(&split)?;
            let h = with_precision!(cfg, decode(&cfg, split))?;
            println!(
                "decoded {} utterances to {}",
                h.hypotheses.len(),
                run::hyps_path(&cfg, split).display()
            );
        }
        Cmd::Score { refs, hyps, out } => {
            let m = Manifest::read(&refs)?;
            let h = HypothesisFile::read(&hyps)?;
            let report = score_files(&m, &h)?;
            println!(
                "WER {:.4} ({} errors / {} words)",
                report.corpus_wer,
                report.errors(),
                report.ref_words
            );
            let out = out.unwrap_or_else(|| hyps.with_file_name("wer_report.json"));
            write_report(&out, &report)?;
        }
        Cmd::Ppl { config, split } => {
            let cfg = load_config(&config)?;
            let split = Split::parse(&split)?;
            let r = with_precision!(cfg, ppl(&cfg, split))?;
            println!(
                "speech-conditioned PPL {:.4}, text-only PPL {:.4} over {} words",
                r.speech_conditioned_ppl, r.text_ppl, r.words
            );
            write_report(
                &cfg.paths.out_dir.join(format!("ppl_{}.json", split.name())),
                &r,
            )?;
        }
        Cmd::Sweep { grid } => {
            let (g, base) = SweepGrid::load(&grid)?;
            let rows = with_precision!(base, sweep(&g, &base))?;
            for r in &rows {
                println!("{:<40} WER {:.4}", r.run, r.test_wer);
            }
            println!(
                "wrote {}",
                base.paths.out_dir.join(run::SWEEP_SUMMARY).display()
            );
        }
        Cmd::EmitCurves { log, out } => {
            let csv = emit_curves(&log, &out)?;
            println!("wrote {} and {}", out.display(), csv.display());
        }
    }
    Ok(())
}

fn pretrain<E: asr_align::Element>(cfg: &RunConfig) -> asr_align::Result<LmTrainReport> {
    run::run_pretrain_lm::<E>(cfg)
}

fn instruct<E: asr_align::Element>(cfg: &RunConfig) -> asr_align::Result<run::InstructReport> {
    run::run_instruction_tune::<E>(cfg)
}

fn train<E: asr_align::Element>(
    cfg: &RunConfig,
    resume: Option<PathBuf>,
    halt: Option<u64>,
) -> asr_align::Result<()> {
    let (_, o) = run::run_train_projector::<E>(cfg, resume, halt)?;
    if o.halted {
        println!(
            "halted at step {}; state saved in {}",
            o.last_step,
            cfg.paths.out_dir.display()
        );
    } else {
        println!(
            "trained {} steps (best step {}, val loss {:.4}{})",
            o.last_step,
            o.best_step,
            o.best_val_loss,
            if o.stopped_early {
                ", stopped early"
            } else {
                ""
            }
        );
    }
    Ok(())
}

fn decode<E: asr_align::Element>(
    cfg: &RunConfig,
    split: Split,
) -> asr_align::Result<HypothesisFile> {
    run::run_decode::<E>(cfg, split)
}

fn ppl<E: asr_align::Element>(cfg: &RunConfig, split: Split) -> asr_align::Result<run::PplReport> {
    run::run_ppl::<E>(cfg, split)
}

fn sweep<E: asr_align::Element>(
    g: &SweepGrid,
    base: &RunConfig,
) -> asr_align::Result<Vec<run::SweepRow>> {
    run::run_sweep::<E>(g, base)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .chain()
                .any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_config));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
