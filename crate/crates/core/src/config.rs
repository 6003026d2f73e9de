//! The single JSON document that drives a run.
//!
//! Unknown keys are rejected everywhere. Relative paths resolve against the
//! directory of the config file. The config hash is the SHA-256 of the parsed
//! config re-serialized with sorted keys, so formatting and key order in the
//! file do not matter.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::prompts::PromptMode;
use crate::error::{Error, Result};
use crate::nn::encoder::EncoderMode;
use crate::nn::pretrain::LmTrainConfig;
use crate::tensor::DType;
use crate::train::checkpoint::sha256_hex;
use crate::train::optim::AdamWConfig;
use crate::train::projector::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Holds `task.json` (for synthetic data) and `train/val/test.jsonl`.
    pub data_dir: PathBuf,
    /// Holds the tokenizer and the base and chat LM checkpoints.
    pub lm_dir: PathBuf,
    /// Projector checkpoints, logs, hypotheses, reports.
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmVariant {
    Base,
    Chat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    /// Which LM checkpoint the projector is aligned to.
    pub variant: LmVariant,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_positions: usize,
    pub mlp_dim: usize,
    pub init_seed: u64,
    pub pretrain_corpus: usize,
    pub pretrain: LmTrainConfig,
    pub instruct_corpus: usize,
    pub instruct: LmTrainConfig,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            variant: LmVariant::Chat,
            model_dim: 64,
            num_layers: 2,
            num_heads: 4,
            max_positions: 256,
            mlp_dim: 256,
            init_seed: 0,
            pretrain_corpus: 20_000,
            pretrain: LmTrainConfig::default(),
            instruct_corpus: 20_000,
            instruct: LmTrainConfig {
                steps: 6000,
                ..LmTrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub mode: EncoderMode,
    /// Output width in affine mode; identity keeps the feature width.
    pub output_dim: Option<usize>,
    pub seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            mode: EncoderMode::Identity,
            output_dim: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorSection {
    pub k: usize,
    pub d_hidden: usize,
    pub init_seed: u64,
}

impl Default for ProjectorSection {
    fn default() -> Self {
        ProjectorSection {
            k: 5,
            d_hidden: 2048,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub beam: usize,
    pub max_new: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            beam: 4,
            max_new: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: DType,
    pub paths: Paths,
    #[serde(default)]
    pub lm: LmSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub projector: ProjectorSection,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub prompt: PromptMode,
    #[serde(default)]
    pub decode: DecodeSection,
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config {
            field: "<document>".into(),
            msg: e.to_string(),
        })?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.paths.data_dir,
            &mut self.paths.lm_dir,
            &mut self.paths.out_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let PromptMode::Library { path: Some(p) } = &mut self.prompt {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(field, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("projector.k", self.projector.k)?;
        positive("projector.d_hidden", self.projector.d_hidden)?;
        positive("decode.beam", self.decode.beam)?;
        positive("lm.model_dim", self.lm.model_dim)?;
        positive("lm.num_heads", self.lm.num_heads)?;
        positive("lm.max_positions", self.lm.max_positions)?;
        if !self.lm.model_dim.is_multiple_of(self.lm.num_heads) {
            return Err(Error::config("lm.num_heads", "must divide lm.model_dim"));
        }
        if let Some(0) = self.encoder.output_dim {
            return Err(Error::config("encoder.output_dim", "must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr_max >= 0.0 && o.lr_max.is_finite()) {
            return Err(Error::config(
                "optimizer.lr_max",
                "must be a finite value ≥ 0",
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer.beta1/beta2", "must lie in [0, 1)"));
        }
        if o.eps.is_nan() || o.eps <= 0.0 {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if o.weight_decay.is_nan() || o.weight_decay < 0.0 {
            return Err(Error::config("optimizer.weight_decay", "must be ≥ 0"));
        }
        self.train.validate()?;
        if let PromptMode::Fixed { text } = &self.prompt {
            if text.trim().is_empty() {
                return Err(Error::config(
                    "prompt.text",
                    "use mode \"none\" for an empty prompt",
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical (sorted-key) JSON form.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        sha256_hex(v.to_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"paths": {"data_dir": "d", "lm_dir": "l", "out_dir": "o"}}"#;

    #[test]
    fn minimal_config_gets_defaults_and_resolved_paths() {
        let c = RunConfig::from_json(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(c.paths.data_dir, PathBuf::from("/base/d"));
        assert_eq!(c.projector.k, 5);
        assert_eq!(c.decode.beam, 4);
        assert_eq!(c.optimizer.warmup_steps, 1000);
    }

    #[test]
    fn unknown_keys_rejected_at_any_depth() {
        let bad = MINIMAL.replace("\"out_dir\"", "\"bogus\": 1, \"out_dir\"");
        assert!(RunConfig::from_json(&bad, Path::new("."))
            .unwrap_err()
            .is_config());
        let bad = r#"{"paths": {"data_dir": "d", "lm_dir": "l", "out_dir": "o"}, "train": {"max_step": 3}}"#;
        assert!(RunConfig::from_json(bad, Path::new("."))
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let bad =
            r#"{"paths": {"data_dir": "d", "lm_dir": "l", "out_dir": "o"}, "projector": {"k": 0}}"#;
        let e = RunConfig::from_json(bad, Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("projector.k"), "{e}");
    }

    #[test]
    fn hash_ignores_formatting_but_not_values() {
        let a = RunConfig::from_json(MINIMAL, Path::new(".")).unwrap();
        let spaced = MINIMAL.replace(": ", ":   ");
        let b = RunConfig::from_json(&spaced, Path::new(".")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = 1;
        assert_ne!(a.hash(), c.hash());
    }
}
