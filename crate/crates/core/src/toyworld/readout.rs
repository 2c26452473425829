use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::numerics::DenseArray;
use crate::quantizers::{sq_dist, Projection, SslTokenizer};
use crate::toyworld::World;

/// Nearest-template symbol readout and speaker estimate.
///
/// Templates live in the space the features are read in: raw phoneme
/// embeddings for continuous features, or their image through a tokenizer's
/// projection pair for decoded tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    /// `[A × d_feat]`.
    pub templates: DenseArray<f32>,
    /// `[speakers × d_feat]` speaker offsets in the same space.
    pub offsets: DenseArray<f32>,
}

fn nearest(templates: &DenseArray<f32>, x: &[f32]) -> usize {
    let mut best = (0, f32::INFINITY);
    for k in 0..templates.rows() {
        let d = sq_dist(templates.row(k), x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

fn collapse(frames: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::new();
    for &s in frames {
        if out.last() != Some(&s) {
            out.push(s);
        }
    }
    out
}

impl Readout {
    pub fn for_features(world: &World) -> Self {
        Self { templates: world.phonemes.clone(), offsets: world.speakers.clone() }
    }

    pub fn for_tokens(world: &World, tokenizer: &SslTokenizer) -> Result<Self> {
        Self::through(world, &tokenizer.projection)
    }

    /// Templates for features reconstructed through `p`.
    pub fn through(world: &World, p: &Projection) -> Result<Self> {
        Ok(Self {
            templates: p.decode(&p.encode(&world.phonemes)?)?,
            offsets: p.decode(&p.encode(&world.speakers)?)?,
        })
    }

    fn offset_estimate(&self, features: &DenseArray<f32>, labels: &[usize]) -> Vec<f32> {
        let d = features.cols();
        let mut mean = vec![0.0f64; d];
        for (i, &k) in labels.iter().enumerate() {
            for ((m, &f), &t) in mean.iter_mut().zip(features.row(i)).zip(self.templates.row(k)) {
                *m += (f - t) as f64;
            }
        }
        let n = labels.len().max(1) as f64;
        mean.into_iter().map(|m| (m / n) as f32).collect()
    }

    fn labels(&self, features: &DenseArray<f32>) -> (Vec<usize>, Vec<f32>) {
        let n = features.rows();
        let raw: Vec<usize> = (0..n).map(|i| nearest(&self.templates, features.row(i))).collect();
        let est = self.offset_estimate(features, &raw);
        let mut centered = vec![0.0f32; features.cols()];
        let labels: Vec<usize> = (0..n)
            .map(|i| {
                for ((c, &f), &e) in centered.iter_mut().zip(features.row(i)).zip(&est) {
                    *c = f - e;
                }
                nearest(&self.templates, &centered)
            })
            .collect();
        let est = self.offset_estimate(features, &labels);
        (labels, est)
    }

    /// Per-frame symbol labels after removing the utterance's speaker offset.
    pub fn classify(&self, features: &DenseArray<f32>) -> Vec<u32> {
        self.labels(features).0.into_iter().map(|k| k as u32).collect()
    }

    /// Run-length collapsed symbol sequence.
    pub fn symbols(&self, features: &DenseArray<f32>) -> Vec<u32> {
        collapse(&self.classify(features))
    }

    /// Mean residual of frames against their templates.
    pub fn speaker_embedding(&self, features: &DenseArray<f32>) -> Vec<f32> {
        self.labels(features).1
    }

    /// Cosine of the speaker embedding of `features` against `speaker`'s offset.
    pub fn speaker_similarity(&self, features: &DenseArray<f32>, speaker: usize) -> f64 {
        cosine(&self.speaker_embedding(features), self.offsets.row(speaker))
    }

    /// Decodes tokens and reads their symbols.
    pub fn token_symbols(&self, tokenizer: &SslTokenizer, tokens: &[u32]) -> Result<Vec<u32>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.symbols(&tokenizer.decode_tokens(tokens)?))
    }
}

/// Symbol readout of SSL tokens.
pub fn symbols_from_tokens(tokens: &[u32], world: &World, tokenizer: &SslTokenizer) -> Result<Vec<u32>> {
    Readout::for_tokens(world, tokenizer)?.token_symbols(tokenizer, tokens)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / libm::sqrt(aa * bb)
    }
}

/// Levenshtein distance over `max(len(ref), 1)`.
pub fn symbol_error_rate(hyp: &[u32], reference: &[u32]) -> f64 {
    let mut prev: Vec<usize> = (0..=hyp.len()).collect();
    let mut cur = vec![0; hyp.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hyp.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[hyp.len()] as f64 / reference.len().max(1) as f64
}
