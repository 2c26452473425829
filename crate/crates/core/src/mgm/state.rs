use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::numerics::{softmax_cross_entropy, DenseArray, Real};

/// Token sequence under iterative decoding.
///
/// Masked positions hold `mask_id`; committed positions are final and are
/// never remasked. The first `prompt_len` positions are always committed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskState {
    pub tokens: Vec<u32>,
    pub committed: Vec<bool>,
    pub prompt_len: usize,
    pub mask_id: u32,
}

impl MaskState {
    /// Fully masked sequence of `len` positions after a committed prompt.
    pub fn new(len: usize, prompt: &[u32], mask_id: u32) -> Result<Self> {
        ensure!(prompt.len() <= len, Argument, "prompt of {} exceeds length {}", prompt.len(), len);
        ensure!(prompt.iter().all(|&t| t != mask_id), Argument, "prompt contains the mask id");
        let mut tokens = vec![mask_id; len];
        tokens[..prompt.len()].copy_from_slice(prompt);
        let mut committed = vec![false; len];
        committed[..prompt.len()].iter_mut().for_each(|c| *c = true);
        Ok(Self { tokens, committed, prompt_len: prompt.len(), mask_id })
    }

    /// Training view: `targets` with `mask[i]` positions replaced by the mask id.
    pub fn from_targets(targets: &[u32], mask: &[bool], prompt_len: usize, mask_id: u32) -> Result<Self> {
        ensure!(targets.len() == mask.len(), Shape, "{} targets vs {} mask flags", targets.len(), mask.len());
        ensure!(prompt_len <= targets.len(), Argument, "prompt exceeds sequence");
        ensure!(mask[..prompt_len].iter().all(|&m| !m), Argument, "prompt positions must stay unmasked");
        let tokens = targets.iter().zip(mask).map(|(&t, &m)| if m { mask_id } else { t }).collect();
        let committed = mask.iter().map(|&m| !m).collect();
        Ok(Self { tokens, committed, prompt_len, mask_id })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn committed_count(&self) -> usize {
        self.committed.iter().filter(|&&c| c).count()
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.mask_id).count()
    }

    pub fn check_invariants(&self) -> Result<()> {
        ensure!(self.committed[..self.prompt_len].iter().all(|&c| c), State, "prompt position not committed");
        ensure!(
            self.tokens.iter().zip(&self.committed).all(|(&t, &c)| !c || t != self.mask_id),
            State,
            "committed position holds the mask id"
        );
        Ok(())
    }
}

/// Masked cross-entropy `Σ_i m_i · −log p(y_i)`; unmasked rows are never read.
pub fn masked_loss<T: Real>(logits: &DenseArray<T>, targets: &[u32], mask: &[bool]) -> Result<T> {
    ensure!(mask.len() == logits.rows(), Shape, "{} mask flags for {} rows", mask.len(), logits.rows());
    let w: Vec<T> = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    Ok(softmax_cross_entropy(logits, targets, &w)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    #[test]
    fn zero_mask_zero_loss() {
        let l = DenseArray::<f64>::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 9.0]).unwrap();
        assert_eq!(masked_loss(&l, &[0, 1], &[false, false]).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_over_8192_codes() {
        let v = 8192;
        let l = DenseArray::<f64>::zeros(&[1, v]);
        let loss = masked_loss(&l, &[17], &[true]).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-9);
        assert!((loss - 9.0109).abs() < 1e-4);
    }

    #[test]
    fn new_state_invariants() {
        let s = MaskState::new(5, &[3, 4], 9).unwrap();
        assert_eq!(s.tokens, [3, 4, 9, 9, 9]);
        assert_eq!(s.committed_count(), 2);
        s.check_invariants().unwrap();
        assert!(MaskState::new(1, &[1, 2], 9).is_err());
    }

    proptest! {
        #[test]
        fn unmasked_rows_do_not_matter(seed in 0u64..5000) {
            let mut rng = RngStream::new(seed);
            let (n, v) = (6, 5);
            let data: Vec<f64> = (0..n * v).map(|_| rng.normal()).collect();
            let targets: Vec<u32> = (0..n).map(|_| rng.below(v) as u32).collect();
            let mask: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
            let base = masked_loss(&DenseArray::from_vec(&[n, v], data.clone()).unwrap(), &targets, &mask).unwrap();
            let mut d2 = data.clone();
            let mut t2 = targets.clone();
            for i in 0..n {
                if !mask[i] {
                    t2[i] = rng.below(v) as u32;
                    for j in 0..v {
                        d2[i * v + j] = 100.0 * rng.normal();
                    }
                }
            }
            let other = masked_loss(&DenseArray::from_vec(&[n, v], d2).unwrap(), &t2, &mask).unwrap();
            prop_assert_eq!(base.to_bits(), other.to_bits());
        }
    }
}
