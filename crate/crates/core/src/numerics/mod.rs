//! Dense-array math, reverse-mode differentiation and seeded randomness.
//!
//! All continuous quantities in the crate are carried by [`DenseArray`].
//! Training code records a forward pass on a [`Tape`] and calls
//! [`Tape::backward`]; the op set is deliberately closed (matmul, elementwise
//! ops, softmax attention, RMS norm, rotary rotation, embedding gather and
//! cross-entropy) and every op has a hand-written vector-Jacobian product
//! verified by [`gradient_check`].

mod array;
mod gradcheck;
pub(crate) mod kernels;
mod loss;
mod optim;
mod params;
mod real;
mod rng;
mod tape;

pub use array::DenseArray;
pub use gradcheck::{gradient_check, GradCheckReport, ScalarObjective};
pub use loss::softmax_cross_entropy;
pub use optim::{AdamW, AdamWConfig, AdamWState};
pub use params::{Param, ParamStore};
pub use real::Real;
pub use rng::{RngState, RngStream};
pub use tape::{Grads, Tape, Var};
