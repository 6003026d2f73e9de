//! Decoder-only transformer: learned positions, pre-norm blocks with a ReLU
//! MLP, untied output head.
//!
//! The forward pass takes a sequence of input *embeddings* rather than token
//! ids, so projected speech rows can be spliced between text-token rows.
//! [`LmVars::embed`] performs the usual table lookup for the text parts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::tensor::{Element, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_positions: usize,
    pub mlp_dim: usize,
}

impl LmConfig {
    pub fn toy(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            model_dim: 64,
            num_layers: 2,
            num_heads: 4,
            max_positions: 256,
            mlp_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |f: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("lm.{f}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        pos("vocab_size", self.vocab_size)?;
        pos("model_dim", self.model_dim)?;
        pos("num_heads", self.num_heads)?;
        pos("max_positions", self.max_positions)?;
        pos("mlp_dim", self.mlp_dim)?;
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "lm.num_heads",
                format!(
                    "{} does not divide model_dim {}",
                    self.num_heads, self.model_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<E: Element> {
    pub ln1_g: Tensor<E>,
    pub ln1_b: Tensor<E>,
    pub wq: Tensor<E>,
    pub bq: Tensor<E>,
    pub wk: Tensor<E>,
    pub bk: Tensor<E>,
    pub wv: Tensor<E>,
    pub bv: Tensor<E>,
    pub wo: Tensor<E>,
    pub bo: Tensor<E>,
    pub ln2_g: Tensor<E>,
    pub ln2_b: Tensor<E>,
    pub w_up: Tensor<E>,
    pub b_up: Tensor<E>,
    pub w_down: Tensor<E>,
    pub b_down: Tensor<E>,
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w_up",
    "b_up", "w_down", "b_down",
];

impl<E: Element> Block<E> {
    fn fields(&self) -> [&Tensor<E>; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<E>; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyCausalLm<E: Element> {
    pub config: LmConfig,
    pub tok_emb: Tensor<E>,
    pub pos_emb: Tensor<E>,
    pub blocks: Vec<Block<E>>,
    pub lnf_g: Tensor<E>,
    pub lnf_b: Tensor<E>,
    pub head: Tensor<E>,
}

impl<E: Element> TinyCausalLm<E> {
    /// GPT-2 style initialization: N(0, 0.02) weights, residual output
    /// projections scaled by 1/sqrt(2·layers), unit LayerNorm gains.
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let h = config.mlp_dim;
        let std = 0.02;
        let resid_std = std / ((2 * config.num_layers.max(1)) as f64).sqrt();
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                ln1_g: Tensor::ones(&[d]),
                ln1_b: Tensor::zeros(&[d]),
                wq: Tensor::randn(&[d, d], std, &mut rng),
                bq: Tensor::zeros(&[d]),
                wk: Tensor::randn(&[d, d], std, &mut rng),
                bk: Tensor::zeros(&[d]),
                wv: Tensor::randn(&[d, d], std, &mut rng),
                bv: Tensor::zeros(&[d]),
                wo: Tensor::randn(&[d, d], resid_std, &mut rng),
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::ones(&[d]),
                ln2_b: Tensor::zeros(&[d]),
                w_up: Tensor::randn(&[d, h], std, &mut rng),
                b_up: Tensor::zeros(&[h]),
                w_down: Tensor::randn(&[h, d], resid_std, &mut rng),
                b_down: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(TinyCausalLm {
            tok_emb: Tensor::randn(&[config.vocab_size, d], std, &mut rng),
            pos_emb: Tensor::randn(&[config.max_positions, d], std, &mut rng),
            blocks,
            lnf_g: Tensor::ones(&[d]),
            lnf_b: Tensor::zeros(&[d]),
            head: Tensor::randn(&[d, config.vocab_size], std, &mut rng),
            config,
        })
    }

    /// Rebuilds a model from named tensors as produced by [`Parameters::named_params`].
    pub fn from_named(config: LmConfig, named: &[(String, Tensor<E>)]) -> Result<Self> {
        let mut lm = Self::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = lm
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != named.len() {
            return Err(Error::Validation(format!(
                "LM checkpoint has {} tensors, config implies {}",
                named.len(),
                expected.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(named) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Validation(format!(
                    "LM tensor mismatch: expected {name}{shape:?}, found {got_name}{:?}",
                    t.shape()
                )));
            }
        }
        for (slot, (_, t)) in lm.params_mut().into_iter().zip(named) {
            *slot = t.clone();
        }
        Ok(lm)
    }

    /// Binds every parameter as a tape leaf; frozen unless `trainable`.
    pub fn bind(&self, tape: &mut Tape<E>, trainable: bool) -> LmVars {
        let mut leaf = |t: &Tensor<E>| tape.leaf(t.clone(), trainable);
        let tok_emb = leaf(&self.tok_emb);
        let pos_emb = leaf(&self.pos_emb);
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let f = b.fields();
                let v: Vec<Var> = f.iter().map(|t| leaf(t)).collect();
                BlockVars {
                    ln1_g: v[0],
                    ln1_b: v[1],
                    wq: v[2],
                    bq: v[3],
                    wk: v[4],
                    bk: v[5],
                    wv: v[6],
                    bv: v[7],
                    wo: v[8],
                    bo: v[9],
                    ln2_g: v[10],
                    ln2_b: v[11],
                    w_up: v[12],
                    b_up: v[13],
                    w_down: v[14],
                    b_down: v[15],
                }
            })
            .collect();
        LmVars {
            config: self.config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: leaf(&self.lnf_g),
            lnf_b: leaf(&self.lnf_b),
            head: leaf(&self.head),
        }
    }

    /// Logits for a token-id sequence, no gradients kept.
    pub fn logits_for_ids(&self, ids: &[usize]) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = vars.embed(&mut tape, ids)?;
        let y = vars.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Logits for an embedding sequence, no gradients kept.
    pub fn logits_for_embeddings(&self, emb: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(emb.clone());
        let y = vars.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

impl<E: Element> Parameters<E> for TinyCausalLm<E> {
    fn named_params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out.push(("head".to_string(), &self.head));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.head);
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w_up: Var,
    pub b_up: Var,
    pub w_down: Var,
    pub b_down: Var,
}

impl BlockVars {
    fn all(&self) -> [Var; 16] {
        [
            self.ln1_g,
            self.ln1_b,
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln2_g,
            self.ln2_b,
            self.w_up,
            self.b_up,
            self.w_down,
            self.b_down,
        ]
    }
}

/// Tape handles of a bound [`TinyCausalLm`].
#[derive(Clone, Debug)]
pub struct LmVars {
    pub config: LmConfig,
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub head: Var,
}

impl LmVars {
    /// Handles in the same order as [`Parameters::named_params`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend(b.all());
        }
        out.extend([self.lnf_g, self.lnf_b, self.head]);
        out
    }

    pub fn embed<E: Element>(&self, tape: &mut Tape<E>, ids: &[usize]) -> Result<Var> {
        tape.gather(self.tok_emb, ids)
    }

    /// Causal logits `[T × vocab]` for input embeddings `[T × model_dim]`.
    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let (t, d) = tape.value(x).dims2()?;
        let cfg = &self.config;
        if d != cfg.model_dim {
            return Err(Error::shape("lm_forward", &[t, d], &[t, cfg.model_dim]));
        }
        if t > cfg.max_positions {
            return Err(Error::Length {
                len: t,
                max: cfg.max_positions,
            });
        }
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.gather(self.pos_emb, &positions)?;
        let mut h = tape.add(x, pos)?;
        let mask = causal_mask::<E>(t);
        let dh = cfg.head_dim();
        let inv_sqrt = E::of(1.0 / (dh as f64).sqrt());

        for b in &self.blocks {
            let a = tape.layer_norm(h, b.ln1_g, b.ln1_b, LN_EPS)?;
            let q = tape.affine(a, b.wq, b.bq)?;
            let k = tape.affine(a, b.wk, b.bk)?;
            let v = tape.affine(a, b.wv, b.bv)?;
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for i in 0..cfg.num_heads {
                let qh = tape.slice_cols(q, i * dh, dh)?;
                let kh = tape.slice_cols(k, i * dh, dh)?;
                let vh = tape.slice_cols(v, i * dh, dh)?;
                let s = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(s, inv_sqrt);
                let p = tape.softmax_rows(s, Some(&mask))?;
                heads.push(tape.matmul(p, vh)?);
            }
            let o = tape.concat_cols(&heads)?;
            let o = tape.affine(o, b.wo, b.bo)?;
            h = tape.add(h, o)?;

            let m = tape.layer_norm(h, b.ln2_g, b.ln2_b, LN_EPS)?;
            let m = tape.affine(m, b.w_up, b.b_up)?;
            let m = tape.relu(m);
            let m = tape.affine(m, b.w_down, b.b_down)?;
            h = tape.add(h, m)?;
        }
        let h = tape.layer_norm(h, self.lnf_g, self.lnf_b, LN_EPS)?;
        tape.matmul(h, self.head)
    }
}

/// Additive mask: 0 on and below the diagonal, `-inf` above.
pub fn causal_mask<E: Element>(t: usize) -> Tensor<E> {
    let mut m = vec![E::zero(); t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = E::neg_infinity();
        }
    }
    Tensor::from_parts(vec![t, t], m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TinyCausalLm<f64> {
        let cfg = LmConfig {
            vocab_size: 11,
            model_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_positions: 16,
            mlp_dim: 12,
        };
        TinyCausalLm::init(cfg, 7).unwrap()
    }

    #[test]
    fn single_position_shape() {
        let lm = small();
        assert_eq!(lm.logits_for_ids(&[3]).unwrap().shape(), &[1, 11]);
    }

    #[test]
    fn appending_does_not_change_earlier_logits() {
        let lm = small();
        let a = lm.logits_for_ids(&[1, 4, 2]).unwrap();
        let b = lm.logits_for_ids(&[1, 4, 2, 9]).unwrap();
        assert_eq!(a.data(), &b.data()[..3 * 11]);
    }

    #[test]
    fn too_long_is_length_error() {
        let lm = small();
        let ids = vec![0; 17];
        assert!(matches!(
            lm.logits_for_ids(&ids),
            Err(Error::Length { len: 17, max: 16 })
        ));
    }

    #[test]
    fn embedding_bypass_matches_token_path() {
        let lm = small();
        let ids = [5, 0, 10, 3];
        let by_ids = lm.logits_for_ids(&ids).unwrap();
        let mut rows = Vec::new();
        for &i in &ids {
            rows.extend_from_slice(lm.tok_emb.row(i));
        }
        let emb = Tensor::new(vec![4, 8], rows).unwrap();
        assert_eq!(lm.logits_for_embeddings(&emb).unwrap(), by_ids);
    }

    #[test]
    fn named_roundtrip() {
        let lm = small();
        let named: Vec<(String, Tensor<f64>)> = lm
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let back = TinyCausalLm::from_named(lm.config.clone(), &named).unwrap();
        assert_eq!(back, lm);
        assert!(TinyCausalLm::<f64>::from_named(lm.config.clone(), &named[1..]).is_err());
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut cfg = LmConfig::toy(10);
        cfg.num_heads = 5;
        assert!(cfg.validate().is_err());
    }
}
