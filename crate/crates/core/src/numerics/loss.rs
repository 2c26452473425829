use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::numerics::{DenseArray, Real, Tape};

/// Weighted softmax cross-entropy over the rows of `logits`.
///
/// Returns `Σ_i w_i · −log softmax(logits_i)[targets_i]` and its gradient with
/// respect to the logits. Weights must be 0 or 1; rows with weight 0 have an
/// all-zero gradient and their logits are never read.
pub fn softmax_cross_entropy<T: Real>(
    logits: &DenseArray<T>,
    targets: &[u32],
    weights: &[T],
) -> Result<(T, DenseArray<T>)> {
    ensure!(logits.shape().len() == 2, Shape, "logits must be rank 2, got {:?}", logits.shape());
    ensure!(
        weights.iter().all(|&w| w == T::zero() || w == T::one()),
        Domain,
        "cross-entropy weights must be binary"
    );
    let mut tape = Tape::new();
    let l = tape.leaf(logits, true);
    let loss = tape.cross_entropy(l, targets, weights)?;
    let mut grads = tape.backward(loss);
    let g: Vec<T> = grads.take(l).unwrap_or_else(|| alloc::vec![T::zero(); logits.len()]);
    Ok((tape.scalar(loss), DenseArray::from_vec(logits.shape(), g)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::Error;
    use alloc::vec;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> DenseArray<f64> {
        DenseArray::from_vec(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits() {
        let (l, _) = softmax_cross_entropy(&row(&[0.0; 4]), &[2], &[1.0]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn saturated_logits() {
        let (l, _) = softmax_cross_entropy(&row(&[1000.0, 0.0]), &[0], &[1.0]).unwrap();
        assert!(l < 1e-9);
        let (l32, _) = softmax_cross_entropy(&DenseArray::from_vec(&[1, 2], vec![1000f32, 0.0]).unwrap(), &[0], &[1.0])
            .unwrap();
        assert!(l32 < 1e-9);
    }

    #[test]
    fn closed_form_two_logits() {
        // −log(e¹ / (e¹ + e²)) = ln(1 + e)
        let (l, g) = softmax_cross_entropy(&row(&[1.0, 2.0]), &[0], &[1.0]).unwrap();
        let expected = (1.0 + core::f64::consts::E).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 1.31326).abs() < 1e-5);
        let p0 = 1.0 / (1.0 + core::f64::consts::E);
        assert!((g.data()[0] - (p0 - 1.0)).abs() < 1e-12);
        assert!((g.data()[1] - (1.0 - p0)).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_rows_have_zero_grad() {
        let logits = DenseArray::from_vec(&[2, 3], vec![0.3, -1.0, 2.0, 5.0, 1.0, 0.0]).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &[0, 2], &[0.0, 1.0]).unwrap();
        assert!(g.row(0).iter().all(|&v| v == 0.0));
        assert!(g.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn errors() {
        assert!(matches!(softmax_cross_entropy(&row(&[0.0, 0.0]), &[2], &[1.0]), Err(Error::Domain(_))));
        assert!(matches!(softmax_cross_entropy(&row(&[0.0, 0.0]), &[0, 1], &[1.0, 1.0]), Err(Error::Shape(_))));
        assert!(matches!(softmax_cross_entropy(&row(&[0.0, 0.0]), &[0], &[0.5]), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn shift_invariance(seed in 0u64..10_000, shift in -50.0f64..50.0) {
            let mut rng = RngStream::new(seed);
            let v: Vec<f64> = (0..6).map(|_| 3.0 * rng.normal()).collect();
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let t = [rng.below(6) as u32];
            let (a, _) = softmax_cross_entropy(&row(&v), &t, &[1.0]).unwrap();
            let (b, _) = softmax_cross_entropy(&row(&shifted), &t, &[1.0]).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
