use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::numerics::{DenseArray, Real};

/// Classifier-free guidance: `(1 + w)·cond − w·uncond`.
///
/// Evaluated as `cond + w·(cond − uncond)`, returning `cond` untouched where
/// `w = 0` or the branches agree, so both identities hold bit-exactly.
pub fn cfg_combine<T: Real>(cond: &DenseArray<T>, uncond: &DenseArray<T>, w: T) -> Result<DenseArray<T>> {
    ensure!(cond.shape() == uncond.shape(), Shape, "cfg shapes {:?} vs {:?}", cond.shape(), uncond.shape());
    ensure!(w >= T::zero(), Argument, "guidance weight must be non-negative");
    if w == T::zero() {
        return Ok(cond.clone());
    }
    let data: Vec<T> = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(&c, &u)| if c == u { c } else { c + w * (c - u) })
        .collect();
    DenseArray::from_vec(cond.shape(), data)
}
