use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::numerics::{DenseArray, RngStream};
use crate::quantizers::sq_dist;

/// Code table with exponential-moving-average training state.
///
/// For every code, `codes[k] == ema_sums[k] / ema_counts[k]` after each
/// update that selected it.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub codes: DenseArray<f32>,
    pub ema_counts: Vec<f32>,
    pub ema_sums: DenseArray<f32>,
    /// Consecutive training steps in which each code went unselected.
    pub unused_steps: Vec<u32>,
    pub decay: f32,
    /// A code unused this many steps in a row is re-seeded from the batch.
    pub dead_after: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VqStepStats {
    /// Mean squared distance between frames and their selected codes.
    pub recon_loss: f32,
    /// `commit_weight ×` the same distance against stopped codes.
    pub commit_loss: f32,
}

impl Codebook {
    /// Codebook over the given `[K × d]` codes, each with EMA count 1.
    pub fn new(codes: DenseArray<f32>) -> Result<Self> {
        ensure!(codes.shape().len() == 2 && codes.rows() >= 1, Argument, "codebook needs K >= 1 codes");
        ensure!(codes.is_finite(), Numeric, "codebook contains non-finite values");
        let k = codes.rows();
        Ok(Self {
            ema_counts: vec![1.0; k],
            ema_sums: codes.clone(),
            codes,
            unused_steps: vec![0; k],
            decay: 0.99,
            dead_after: 200,
        })
    }

    /// `k` codes drawn from random rows of `frames`.
    pub fn from_frames(frames: &DenseArray<f32>, k: usize, rng: &mut RngStream) -> Result<Self> {
        ensure!(frames.rows() > 0, Argument, "cannot seed a codebook from no frames");
        let d = frames.cols();
        let mut data = Vec::with_capacity(k * d);
        for _ in 0..k {
            data.extend_from_slice(frames.row(rng.below(frames.rows())));
        }
        Self::new(DenseArray::from_vec(&[k, d], data)?)
    }

    pub fn size(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn code(&self, id: u32) -> &[f32] {
        self.codes.row(id as usize)
    }

    /// Exhaustive nearest code; ties go to the lowest index.
    pub fn nearest(&self, x: &[f32]) -> (u32, f32) {
        let mut best = (0u32, f32::INFINITY);
        for k in 0..self.size() {
            let d = sq_dist(x, self.codes.row(k));
            if d < best.1 {
                best = (k as u32, d);
            }
        }
        best
    }

    /// Nearest-code id for every frame.
    pub fn quantize(&self, frames: &DenseArray<f32>) -> Result<Vec<u32>> {
        ensure!(frames.cols() == self.dim(), Shape, "frame dim {} vs code dim {}", frames.cols(), self.dim());
        Ok((0..frames.rows()).map(|i| self.nearest(frames.row(i)).0).collect())
    }

    /// Maps ids back to their code vectors.
    pub fn dequantize(&self, ids: &[u32]) -> Result<DenseArray<f32>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            ensure!((id as usize) < self.size(), Domain, "code id {} outside codebook of {}", id, self.size());
            out.extend_from_slice(self.code(id));
        }
        DenseArray::from_vec(&[ids.len(), d], out)
    }

    /// One EMA step on `batch`: assigns frames, reports losses and moves
    /// every selected code to its updated `ema_sums / ema_counts`.
    pub fn train_step(&mut self, batch: &DenseArray<f32>, commit_weight: f32, rng: &mut RngStream) -> Result<VqStepStats> {
        ensure!(batch.rows() > 0, Argument, "empty training batch");
        let ids = self.quantize(batch)?;
        self.apply_ema(batch, &ids, commit_weight, rng)
    }

    /// EMA update with precomputed assignments.
    pub fn apply_ema(
        &mut self,
        batch: &DenseArray<f32>,
        ids: &[u32],
        commit_weight: f32,
        rng: &mut RngStream,
    ) -> Result<VqStepStats> {
        ensure!(batch.rows() > 0, Argument, "empty training batch");
        ensure!(ids.len() == batch.rows(), Shape, "{} ids for {} frames", ids.len(), batch.rows());
        let (k, d) = (self.size(), self.dim());
        let mut counts = vec![0.0f32; k];
        let mut sums = vec![0.0f32; k * d];
        let mut err = 0.0f64;
        for (i, &id) in ids.iter().enumerate() {
            let x = batch.row(i);
            err += sq_dist(x, self.code(id)) as f64;
            counts[id as usize] += 1.0;
            for j in 0..d {
                sums[id as usize * d + j] += x[j];
            }
        }
        let recon = (err / batch.rows() as f64) as f32;
        let g = self.decay;
        for c in 0..k {
            self.ema_counts[c] = g * self.ema_counts[c] + (1.0 - g) * counts[c];
            let s = self.ema_sums.row_mut(c);
            for j in 0..d {
                s[j] = g * s[j] + (1.0 - g) * sums[c * d + j];
            }
            if counts[c] > 0.0 {
                self.unused_steps[c] = 0;
                let n = self.ema_counts[c];
                let (sums_row, code) = (self.ema_sums.row(c).to_vec(), self.codes.row_mut(c));
                for j in 0..d {
                    code[j] = sums_row[j] / n;
                }
            } else {
                self.unused_steps[c] += 1;
                if self.unused_steps[c] >= self.dead_after {
                    let frame = batch.row(rng.below(batch.rows())).to_vec();
                    self.codes.row_mut(c).copy_from_slice(&frame);
                    self.ema_sums.row_mut(c).copy_from_slice(&frame);
                    self.ema_counts[c] = 1.0;
                    self.unused_steps[c] = 0;
                }
            }
        }
        Ok(VqStepStats { recon_loss: recon, commit_loss: commit_weight * recon })
    }
}
