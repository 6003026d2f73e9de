//! Linear–ReLU–Linear projector from stacked speech frames to LM embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    /// Frames stacked per projected row.
    pub k: usize,
    pub d_enc: usize,
    #[serde(default = "default_hidden")]
    pub d_hidden: usize,
    pub d_llm: usize,
}

fn default_hidden() -> usize {
    2048
}

impl ProjectorConfig {
    pub fn input_dim(&self) -> usize {
        self.k * self.d_enc
    }

    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("k", self.k),
            ("d_enc", self.d_enc),
            ("d_hidden", self.d_hidden),
            ("d_llm", self.d_llm),
        ] {
            if v == 0 {
                return Err(Error::config(format!("projector.{f}"), "must be positive"));
            }
        }
        Ok(())
    }
}

/// `(k·d_enc)·d_hidden + d_hidden + d_hidden·d_llm + d_llm`.
pub fn count_projector_params(d_enc: u64, k: u64, d_hidden: u64, d_llm: u64) -> u64 {
    k * d_enc * d_hidden + d_hidden + d_hidden * d_llm + d_llm
}

pub const PROJECTOR_NAMES: [&str; 4] = [
    "projector.w1",
    "projector.b1",
    "projector.w2",
    "projector.b2",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorParams<E: Element> {
    pub config: ProjectorConfig,
    /// `[k·d_enc × d_hidden]`
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    /// `[d_hidden × d_llm]`
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ProjectorVars {
    pub fn all(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, z: Var) -> Result<Var> {
        let h = tape.affine(z, self.w1, self.b1)?;
        let h = tape.relu(h);
        tape.affine(h, self.w2, self.b2)
    }
}

impl<E: Element> ProjectorParams<E> {
    /// Uniform `±1/sqrt(fan_in)` for weights and biases alike.
    pub fn init(config: ProjectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let din = config.input_dim();
        let a1 = 1.0 / (din as f64).sqrt();
        let a2 = 1.0 / (config.d_hidden as f64).sqrt();
        Ok(ProjectorParams {
            w1: Tensor::uniform(&[din, config.d_hidden], a1, &mut rng),
            b1: Tensor::uniform(&[config.d_hidden], a1, &mut rng),
            w2: Tensor::uniform(&[config.d_hidden, config.d_llm], a2, &mut rng),
            b2: Tensor::uniform(&[config.d_llm], a2, &mut rng),
            config,
        })
    }

    pub fn from_named(config: ProjectorConfig, named: &[(String, Tensor<E>)]) -> Result<Self> {
        config.validate()?;
        let shapes = [
            vec![config.input_dim(), config.d_hidden],
            vec![config.d_hidden],
            vec![config.d_hidden, config.d_llm],
            vec![config.d_llm],
        ];
        let mut found = Vec::with_capacity(4);
        for (name, shape) in PROJECTOR_NAMES.iter().zip(&shapes) {
            let t = named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(name, t.shape(), shape));
            }
            found.push(t.clone());
        }
        let mut it = found.into_iter();
        let mut next = || it.next().expect("four tensors");
        Ok(ProjectorParams {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            config,
        })
    }

    pub fn bind(&self, tape: &mut Tape<E>, trainable: bool) -> ProjectorVars {
        ProjectorVars {
            w1: tape.leaf(self.w1.clone(), trainable),
            b1: tape.leaf(self.b1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
            b2: tape.leaf(self.b2.clone(), trainable),
        }
    }

    /// Row-wise `relu(z·W1 + b1)·W2 + b2`; `N = 0` gives an empty `[0 × d_llm]`.
    pub fn project(&self, z: &Tensor<E>) -> Result<Tensor<E>> {
        let (_, c) = z.dims2()?;
        if c != self.config.input_dim() {
            return Err(Error::shape(
                "project",
                z.shape(),
                &[z.shape()[0], self.config.input_dim()],
            ));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(z.clone());
        let y = vars.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

impl<E: Element> Parameters<E> for ProjectorParams<E> {
    fn named_params(&self) -> Vec<(String, &Tensor<E>)> {
        PROJECTOR_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip([&self.w1, &self.b1, &self.w2, &self.b2])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ProjectorConfig {
        ProjectorConfig {
            k: 2,
            d_enc: 3,
            d_hidden: 4,
            d_llm: 5,
        }
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let mut p = ProjectorParams::<f64>::init(cfg(), 1).unwrap();
        p.w1 = Tensor::zeros(p.w1.shape());
        p.w2 = Tensor::zeros(p.w2.shape());
        p.b2 = Tensor::from_f64(&[5], &[1., 2., 3., 4., 5.]).unwrap();
        let y = p.project(&Tensor::ones(&[3, 6])).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), &[1., 2., 3., 4., 5.]);
        }
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let p = ProjectorParams::<f64>::init(cfg(), 1).unwrap();
        assert_eq!(p.project(&Tensor::zeros(&[0, 6])).unwrap().shape(), &[0, 5]);
        assert!(p.project(&Tensor::zeros(&[1, 5])).is_err());
    }

    #[test]
    fn parameter_count_matches_tensors() {
        let p = ProjectorParams::<f64>::init(cfg(), 1).unwrap();
        assert_eq!(p.num_params() as u64, count_projector_params(3, 2, 4, 5));
    }

    #[test]
    fn named_roundtrip() {
        let p = ProjectorParams::<f64>::init(cfg(), 3).unwrap();
        let named: Vec<_> = p
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert_eq!(ProjectorParams::from_named(cfg(), &named).unwrap(), p);
    }
}
