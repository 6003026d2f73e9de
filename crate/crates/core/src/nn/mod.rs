//! Frozen actors: the tiny causal LM and the toy speech encoder.

pub mod encoder;
pub mod lm;
pub mod pretrain;

pub use encoder::{EncoderMode, ToySpeechEncoder};
pub use lm::{LmConfig, LmVars, TinyCausalLm};
pub use pretrain::{instruction_tune, pretrain_lm, LmTrainConfig, LmTrainReport};

use crate::tensor::{Element, Tensor};

/// A named, ordered collection of parameter tensors.
pub trait Parameters<E: Element> {
    fn named_params(&self) -> Vec<(String, &Tensor<E>)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<E>>;

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect()
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Little-endian bytes of every parameter in order; used for the
    /// byte-identity checks of the freeze contract.
    fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, t) in self.named_params() {
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out
    }
}
