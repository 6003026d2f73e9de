use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asr-align"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = cli(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SPEC: &str = r#"{
  "task": {"vocab_size": 8, "branching": 3, "min_words": 2, "max_words": 4, "feature_dim": 4},
  "splits": {"train": 24, "val": 6, "test": 6},
  "split_seed": 1
}"#;

const CONFIG: &str = r#"{
  "seed": 3,
  "precision": "f32",
  "paths": {"data_dir": "data", "lm_dir": "lm", "out_dir": "out"},
  "lm": {
    "model_dim": 16, "num_layers": 1, "num_heads": 2, "max_positions": 64, "mlp_dim": 16,
    "pretrain_corpus": 200, "pretrain": {"steps": 20, "batch_size": 4},
    "instruct_corpus": 200, "instruct": {"steps": 20, "batch_size": 4}
  },
  "projector": {"k": 5, "d_hidden": 16},
  "train": {"max_steps": 12, "batch_size": 4, "val_every": 4, "patience": 5},
  "decode": {"beam": 2, "max_new": 8}
}"#;

#[test]
fn help_lists_every_subcommand_and_flag() {
    let top = ok(&["--help"]);
    for sub in [
        "gen-data",
        "pretrain-lm",
        "instruction-tune",
        "train-projector",
        "decode",
        "score",
        "ppl",
        "sweep",
        "emit-curves",
    ] {
        assert!(top.contains(sub), "{sub} missing from --help");
    }
    assert!(top.contains("SLAM_ASR_THREADS"));
    let train = ok(&["train-projector", "--help"]);
    for flag in ["--config", "--resume", "--halt-after"] {
        assert!(train.contains(flag), "{flag} missing");
    }
    let score = ok(&["score", "--help"]);
    for flag in ["--refs", "--hyps", "--out"] {
        assert!(score.contains(flag), "{flag} missing");
    }
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    write(
        &cfg,
        r#"{"paths": {"data_dir": "d", "lm_dir": "l", "out_dir": "o"}, "train": {"batch_size": 0}}"#,
    );
    assert_eq!(
        cli(&["train-projector", "--config", p(&cfg)]).status.code(),
        Some(2)
    );
    write(
        &cfg,
        r#"{"paths": {"data_dir": "d", "lm_dir": "l", "out_dir": "o"}, "bogus": 1}"#,
    );
    assert_eq!(cli(&["decode", "--config", p(&cfg)]).status.code(), Some(2));
    assert_eq!(
        cli(&["decode", "--config", p(&cfg), "--split", "dev"])
            .status
            .code(),
        Some(2)
    );
    // a missing file is a runtime failure, not a config error
    let missing = dir.path().join("missing.json");
    assert_eq!(
        cli(&["score", "--refs", p(&missing), "--hyps", p(&missing)])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn scoring_references_against_themselves_gives_zero() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, SPEC);
    let data = dir.path().join("data");
    ok(&["gen-data", "--spec", p(&spec), "--out", p(&data)]);
    let refs = data.join("test.jsonl");
    let hyps: Vec<serde_json::Value> = std::fs::read_to_string(&refs)
        .unwrap()
        .lines()
        .map(|l| {
            let r: serde_json::Value = serde_json::from_str(l).unwrap();
            serde_json::json!({"id": r["id"], "hyp": r["transcript"], "log_prob": 0.0, "truncated": false})
        })
        .collect();
    let hyp_path = dir.path().join("hyps.json");
    write(
        &hyp_path,
        &serde_json::json!({"config_hash": "x", "hypotheses": hyps}).to_string(),
    );
    let out = ok(&["score", "--refs", p(&refs), "--hyps", p(&hyp_path)]);
    assert!(out.contains("WER 0.0000"), "{out}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("wer_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["corpus_wer"], 0.0);
}

#[test]
fn whole_pipeline_runs_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, SPEC);
    ok(&[
        "gen-data",
        "--spec",
        p(&spec),
        "--out",
        p(&dir.path().join("data")),
    ]);
    let cfg = dir.path().join("run.json");
    write(&cfg, CONFIG);
    let c = p(&cfg);
    ok(&["pretrain-lm", "--config", c]);
    ok(&["instruction-tune", "--config", c]);
    for f in [
        "tokenizer.json",
        "base_lm.slmc",
        "base_lm.slmc.json",
        "chat_lm.slmc",
    ] {
        assert!(dir.path().join("lm").join(f).exists(), "{f}");
    }

    let halted = ok(&["train-projector", "--config", c, "--halt-after", "6"]);
    assert!(halted.contains("halted at step 6"), "{halted}");
    let out = dir.path().join("out");
    let state = out.join("state.slmc");
    ok(&["train-projector", "--config", c, "--resume", p(&state)]);
    let resumed_log = std::fs::read_to_string(out.join("val_log.csv")).unwrap();
    std::fs::remove_dir_all(&out).unwrap();
    ok(&["train-projector", "--config", c]);
    let strip = |s: &str| {
        s.lines()
            .filter(|l| !l.starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(
        strip(&resumed_log),
        strip(&std::fs::read_to_string(out.join("val_log.csv")).unwrap())
    );

    ok(&["decode", "--config", c]);
    let hyps = out.join("hyps_test.json");
    assert!(hyps.exists());
    let score = ok(&[
        "score",
        "--refs",
        p(&dir.path().join("data/test.jsonl")),
        "--hyps",
        p(&hyps),
    ]);
    assert!(score.starts_with("WER "), "{score}");
    let ppl = ok(&["ppl", "--config", c, "--split", "val"]);
    assert!(ppl.contains("PPL"), "{ppl}");
    assert!(out.join("ppl_val.json").exists());

    let svg = dir.path().join("curves/train.svg");
    ok(&[
        "emit-curves",
        "--log",
        p(&out.join("train_log.csv")),
        "--out",
        p(&svg),
    ]);
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.contains("config_hash"));
    assert!(dir.path().join("curves/train.csv").exists());
}

#[test]
fn sweep_writes_a_summary_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, SPEC);
    ok(&[
        "gen-data",
        "--spec",
        p(&spec),
        "--out",
        p(&dir.path().join("data")),
    ]);
    write(&dir.path().join("run.json"), CONFIG);
    let grid = dir.path().join("grid.json");
    write(
        &grid,
        r#"{
  "base": "run.json",
  "encoders": [{"name": "identity", "encoder": {"mode": "identity"}}],
  "lms": ["base", "chat"],
  "prompts": [{"name": "none", "prompt": {"mode": "none"}}]
}"#,
    );
    let out = ok(&["sweep", "--grid", p(&grid)]);
    assert!(
        out.contains("identity__base__none") && out.contains("identity__chat__none"),
        "{out}"
    );
    let summary = std::fs::read_to_string(dir.path().join("out/sweep_summary.csv")).unwrap();
    assert_eq!(
        summary
            .lines()
            .filter(|l| l.starts_with("identity__"))
            .count(),
        2
    );
}
