//! Frame stacking: every `k` consecutive encoder frames become one row.
//!
//! Row `i` of the output is the concatenation of input rows `k·i .. k·i + k`
//! (zero-based). Trailing `T mod k` frames are dropped, never padded. For a
//! row-major `[T × d]` matrix this is exactly a reshape of its first `N·k`
//! rows into `[N × k·d]`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Contract("downsample factor k must be ≥ 1".into()));
    }
    Ok(())
}

pub fn downsample<E: Element>(h: &Tensor<E>, k: usize) -> Result<Tensor<E>> {
    check_k(k)?;
    let (t, d) = h.dims2()?;
    let n = t / k;
    Tensor::new(vec![n, k * d], h.data()[..n * k * d].to_vec())
}

/// Differentiable form, used when the encoder is being fine-tuned.
pub fn downsample_var<E: Element>(tape: &mut Tape<E>, h: Var, k: usize) -> Result<Var> {
    check_k(k)?;
    let (t, d) = tape.value(h).dims2()?;
    let n = t / k;
    let kept = tape.slice_rows(h, 0, n * k)?;
    tape.reshape(kept, &[n, k * d])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_division_drops_tail() {
        let h =
            Tensor::<f64>::from_f64(&[12, 3], &(0..36).map(f64::from).collect::<Vec<_>>()).unwrap();
        let z = downsample(&h, 5).unwrap();
        assert_eq!(z.shape(), &[2, 15]);
        assert_eq!(z.row(1)[0], 15.0);
        assert_eq!(*z.row(1).last().unwrap(), 29.0);
    }

    #[test]
    fn k_one_is_identity_and_short_input_is_empty() {
        let h = Tensor::<f64>::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(downsample(&h, 1).unwrap(), h);
        assert_eq!(downsample(&h, 4).unwrap().shape(), &[0, 8]);
        assert!(downsample(&h, 0).is_err());
    }

    #[test]
    fn fifty_hz_becomes_ten_hz() {
        let h = Tensor::<f64>::zeros(&[50, 4]);
        assert_eq!(downsample(&h, 5).unwrap().shape()[0], 10);
    }
}
