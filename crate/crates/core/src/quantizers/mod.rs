//! Discrete representations: a single-codebook VQ for SSL tokens and a
//! residual VQ stack for acoustic tokens, both trained with EMA codebook
//! updates behind a learned linear down/up projection.

mod codebook;
mod rvq;
mod tokenizer;

pub use codebook::{Codebook, VqStepStats};
pub use rvq::RvqCodebook;
pub use tokenizer::{AcousticTokenizer, Projection, QuantizerConfig, SslTokenizer, TokenizerStats};

use crate::numerics::DenseArray;

/// Frames of continuous features, `[n × d]`, plus an informational rate.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: DenseArray<f32>,
    pub frame_rate: f32,
}

impl FeatureSequence {
    pub fn new(frames: DenseArray<f32>) -> Self {
        Self { frames, frame_rate: 50.0 }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
