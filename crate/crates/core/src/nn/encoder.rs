//! Frame-local toy speech encoder standing in for a pretrained feature extractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Identity,
    Affine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpeechEncoder<E: Element> {
    pub mode: EncoderMode,
    pub input_dim: usize,
    pub output_dim: usize,
    pub frame_rate_hz: f64,
    /// `[input_dim × output_dim]`, empty in identity mode.
    pub weight: Option<Tensor<E>>,
    pub bias: Option<Tensor<E>>,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub weight: Var,
    pub bias: Var,
}

impl<E: Element> ToySpeechEncoder<E> {
    pub fn identity(dim: usize, frame_rate_hz: f64) -> Self {
        ToySpeechEncoder {
            mode: EncoderMode::Identity,
            input_dim: dim,
            output_dim: dim,
            frame_rate_hz,
            weight: None,
            bias: None,
        }
    }

    /// Fixed random per-frame affine map with `N(0, 1/input_dim)` weights.
    pub fn affine(input_dim: usize, output_dim: usize, frame_rate_hz: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (input_dim.max(1) as f64).sqrt();
        ToySpeechEncoder {
            mode: EncoderMode::Affine,
            input_dim,
            output_dim,
            frame_rate_hz,
            weight: Some(Tensor::randn(&[input_dim, output_dim], std, &mut rng)),
            bias: Some(Tensor::randn(&[output_dim], 0.1, &mut rng)),
        }
    }

    pub fn bind(&self, tape: &mut Tape<E>, trainable: bool) -> Option<EncoderVars> {
        match (&self.weight, &self.bias) {
            (Some(w), Some(b)) => Some(EncoderVars {
                weight: tape.leaf(w.clone(), trainable),
                bias: tape.leaf(b.clone(), trainable),
            }),
            _ => None,
        }
    }

    fn check_dims(&self, shape: &[usize]) -> Result<()> {
        match shape {
            &[_, d] if d == self.input_dim => Ok(()),
            _ => Err(Error::shape("encode_frames", shape, &[0, self.input_dim])),
        }
    }

    /// Differentiable per-frame mapping `[T × input_dim] → [T × output_dim]`.
    pub fn encode(
        &self,
        tape: &mut Tape<E>,
        vars: Option<EncoderVars>,
        frames: Var,
    ) -> Result<Var> {
        self.check_dims(tape.value(frames).shape())?;
        match (self.mode, vars) {
            (EncoderMode::Identity, _) => Ok(frames),
            (EncoderMode::Affine, Some(v)) => tape.affine(frames, v.weight, v.bias),
            (EncoderMode::Affine, None) => Err(Error::Contract(
                "affine encoder used without bound weights".into(),
            )),
        }
    }

    pub fn encode_frames(&self, frames: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(frames.clone());
        let y = self.encode(&mut tape, vars, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn from_named(
        mode: EncoderMode,
        input_dim: usize,
        output_dim: usize,
        frame_rate_hz: f64,
        named: &[(String, Tensor<E>)],
    ) -> Result<Self> {
        let mut enc = ToySpeechEncoder::identity(input_dim, frame_rate_hz);
        enc.output_dim = output_dim;
        enc.mode = mode;
        if mode == EncoderMode::Identity {
            if input_dim != output_dim || !named.is_empty() {
                return Err(Error::Validation(
                    "identity encoder must have equal dims and no tensors".into(),
                ));
            }
            return Ok(enc);
        }
        let find = |n: &str, shape: &[usize]| {
            named
                .iter()
                .find(|(k, _)| k == n)
                .filter(|(_, t)| t.shape() == shape)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Validation(format!("encoder tensor {n}{shape:?} missing")))
        };
        enc.weight = Some(find("encoder.weight", &[input_dim, output_dim])?);
        enc.bias = Some(find("encoder.bias", &[output_dim])?);
        Ok(enc)
    }
}

impl<E: Element> Parameters<E> for ToySpeechEncoder<E> {
    fn named_params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        if let Some(w) = &self.weight {
            out.push(("encoder.weight".to_string(), w));
        }
        if let Some(b) = &self.bias {
            out.push(("encoder.bias".to_string(), b));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut out = Vec::new();
        if let Some(w) = &mut self.weight {
            out.push(w);
        }
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_passes_through() {
        let enc = ToySpeechEncoder::<f64>::identity(3, 50.0);
        let x = Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(enc.encode_frames(&x).unwrap(), x);
    }

    #[test]
    fn affine_on_zero_frames_replicates_bias() {
        let enc = ToySpeechEncoder::<f64>::affine(4, 3, 50.0, 1);
        let y = enc.encode_frames(&Tensor::zeros(&[5, 4])).unwrap();
        let b = enc.bias.as_ref().unwrap().data();
        for r in 0..5 {
            assert_eq!(y.row(r), b);
        }
    }

    #[test]
    fn deterministic_and_frame_local() {
        let enc = ToySpeechEncoder::<f64>::affine(4, 6, 50.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[7, 4], 1.0, &mut rng);
        let y1 = enc.encode_frames(&x).unwrap();
        assert_eq!(y1, enc.encode_frames(&x).unwrap());
        // perturb frame 3 only; every other output frame is unchanged
        let mut x2 = x.clone();
        x2.data_mut()[3 * 4] += 1.0;
        let y2 = enc.encode_frames(&x2).unwrap();
        for r in 0..7 {
            assert_eq!(y1.row(r) == y2.row(r), r != 3);
        }
    }

    #[test]
    fn dimension_mismatch_errors() {
        let enc = ToySpeechEncoder::<f64>::affine(4, 6, 50.0, 2);
        assert!(enc.encode_frames(&Tensor::zeros(&[2, 5])).is_err());
    }
}
