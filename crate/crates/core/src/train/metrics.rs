use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedAccuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub supervised: usize,
}

impl MaskedAccuracy {
    /// Set when no position was supervised; accuracy is then reported as 0.
    pub fn is_empty(&self) -> bool {
        self.supervised == 0
    }
}

/// Fraction of non-ignored positions whose argmax logit (lowest id on ties)
/// equals the target.
pub fn masked_token_accuracy<E: Element>(
    logits: &Tensor<E>,
    targets: &[usize],
    ignore: usize,
) -> Result<MaskedAccuracy> {
    let (t, _) = logits.dims2()?;
    if t != targets.len() {
        return Err(Error::shape(
            "masked_token_accuracy",
            logits.shape(),
            &[targets.len()],
        ));
    }
    let mut correct = 0;
    let mut supervised = 0;
    for (r, &tgt) in targets.iter().enumerate() {
        if tgt == ignore {
            continue;
        }
        supervised += 1;
        if kernels::argmax(logits.row(r)) == tgt {
            correct += 1;
        }
    }
    let accuracy = if supervised == 0 {
        0.0
    } else {
        correct as f64 / supervised as f64
    };
    Ok(MaskedAccuracy {
        accuracy,
        correct,
        supervised,
    })
}
