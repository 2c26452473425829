use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::mgm::{cfg_combine, remask_count, MaskState, ScheduleConfig};
use crate::numerics::{DenseArray, RngStream};

/// Sampling knobs for [`iterative_decode`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Scale of the Gumbel noise added to log-confidence, annealed linearly
    /// to 0 over the decode. 0 gives the plain lowest-probability rule.
    pub temperature_init: f64,
    /// Token sampling temperature at step 1, annealed linearly towards 0.
    /// 0 means argmax.
    pub sample_temperature: f64,
    /// Classifier-free guidance weight `w`.
    pub cfg_weight: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { temperature_init: 1.0, sample_temperature: 1.0, cfg_weight: 0.0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.temperature_init >= 0.0, Argument, "temperature_init must be >= 0");
        ensure!(self.sample_temperature >= 0.0, Argument, "sample_temperature must be >= 0");
        ensure!(self.cfg_weight >= 0.0, Argument, "cfg_weight must be >= 0");
        Ok(())
    }
}

/// Produces `[n × V]` logits for a (partially) masked sequence. `cond = None`
/// is the unconditional branch used by guidance.
pub trait Predictor {
    type Condition: ?Sized;

    fn predict(&mut self, state: &MaskState, cond: Option<&Self::Condition>) -> Result<DenseArray<f32>>;
}

/// Confidence of a freshly drawn token. Implementations can replace the
/// default probability rule, e.g. with a learned critic.
pub trait ConfidenceScorer {
    /// `probs` is the (guided) distribution at `pos`.
    fn score(&mut self, pos: usize, probs: &[f32], drawn: u32) -> f64;
}

/// `log p(drawn)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProbabilityConfidence;

impl ConfidenceScorer for ProbabilityConfidence {
    fn score(&mut self, _pos: usize, probs: &[f32], drawn: u32) -> f64 {
        libm::log(probs[drawn as usize] as f64)
    }
}

/// Commits drawn tokens except the `count` least confident ones, which return
/// to the mask. Previously committed positions keep their tokens and never
/// enter the remask pool. Ties resolve to the lower position.
pub fn confidence_select(
    probs: &DenseArray<f32>,
    drawn: &[u32],
    state: &MaskState,
    count: usize,
    temperature: f64,
    rng: &mut RngStream,
) -> Result<MaskState> {
    confidence_select_with(&mut ProbabilityConfidence, probs, drawn, state, count, temperature, rng)
}

pub fn confidence_select_with<S: ConfidenceScorer + ?Sized>(
    scorer: &mut S,
    probs: &DenseArray<f32>,
    drawn: &[u32],
    state: &MaskState,
    count: usize,
    temperature: f64,
    rng: &mut RngStream,
) -> Result<MaskState> {
    let n = state.len();
    ensure!(drawn.len() == n && probs.rows() == n, Shape, "probs/drawn do not match state length {}", n);
    ensure!(temperature >= 0.0, Argument, "temperature must be >= 0");
    let mut open: Vec<(f64, usize)> = Vec::new();
    for i in 0..n {
        if state.committed[i] {
            continue;
        }
        ensure!(drawn[i] != state.mask_id, Argument, "drawn token at {} is the mask id", i);
        ensure!((drawn[i] as usize) < probs.cols(), Domain, "drawn token {} outside vocabulary", drawn[i]);
        let mut c = scorer.score(i, probs.row(i), drawn[i]);
        if temperature > 0.0 {
            c += temperature * rng.gumbel();
        }
        open.push((c, i));
    }
    ensure!(count <= open.len(), Argument, "cannot remask {} of {} open positions", count, open.len());
    open.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut next = state.clone();
    for (rank, &(_, i)) in open.iter().enumerate() {
        if rank < count {
            next.tokens[i] = state.mask_id;
            next.committed[i] = false;
        } else {
            next.tokens[i] = drawn[i];
            next.committed[i] = true;
        }
    }
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeStep {
    pub step: usize,
    pub remasked: usize,
    pub committed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub trace: Vec<DecodeStep>,
}

fn softmax_rows(logits: &DenseArray<f32>, temperature: f64) -> DenseArray<f32> {
    let mut out = logits.clone();
    let inv = if temperature > 0.0 { 1.0 / temperature as f32 } else { 1.0 };
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
        let mut z = 0.0f32;
        for v in row.iter_mut() {
            *v = libm::expf((*v - mx) * inv);
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best as u32
}

fn sample_row(p: &[f32], rng: &mut RngStream) -> u32 {
    let u = rng.uniform() as f32;
    let mut acc = 0.0f32;
    for (j, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return j as u32;
        }
    }
    // rounding left the cumulative sum short of 1
    p.iter().rposition(|&v| v > 0.0).unwrap_or(0) as u32
}

/// Confidence-based iterative parallel decoding from a fully masked sequence.
///
/// Each of the `S` steps queries the predictor (twice with guidance),
/// samples every open position, and remasks the `remask_count` least
/// confident draws. The prompt is copied into the output verbatim.
#[allow(clippy::too_many_arguments)]
pub fn iterative_decode<P: Predictor + ?Sized>(
    predictor: &mut P,
    length: usize,
    prompt: &[u32],
    cond: Option<&P::Condition>,
    mask_id: u32,
    cfg: &DecodeConfig,
    sched: &ScheduleConfig,
    rng: &mut RngStream,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    sched.validate()?;
    if length == 0 {
        return Ok(DecodeOutput { tokens: Vec::new(), trace: Vec::new() });
    }
    let mut state = MaskState::new(length, prompt, mask_id)?;
    let open = length - prompt.len();
    let steps = sched.steps;
    let mut trace = Vec::with_capacity(steps);
    for j in 1..=steps {
        let mut logits = predictor.predict(&state, cond)?;
        ensure!(logits.rows() == length, Shape, "predictor returned {} rows for length {}", logits.rows(), length);
        ensure!((mask_id as usize) >= logits.cols(), Argument, "mask id {} inside the vocabulary", mask_id);
        if cfg.cfg_weight > 0.0 && cond.is_some() {
            let uncond = predictor.predict(&state, None)?;
            logits = cfg_combine(&logits, &uncond, cfg.cfg_weight as f32)?;
        }
        let frac_done = (j - 1) as f64 / steps as f64;
        let sample_t = cfg.sample_temperature * (1.0 - frac_done);
        let conf_t = cfg.temperature_init * (1.0 - j as f64 / steps as f64);
        let probs = softmax_rows(&logits, 1.0);
        let sampling = if sample_t > 0.0 && sample_t != 1.0 { Some(softmax_rows(&logits, sample_t)) } else { None };
        let mut drawn = state.tokens.clone();
        for i in 0..length {
            if state.committed[i] {
                continue;
            }
            drawn[i] = if sample_t == 0.0 {
                argmax(logits.row(i))
            } else {
                sample_row(sampling.as_ref().unwrap_or(&probs).row(i), rng)
            };
        }
        let count = remask_count(open, j, sched)?;
        state = confidence_select(&probs, &drawn, &state, count, conf_t, rng)?;
        trace.push(DecodeStep { step: j, remasked: count, committed: state.committed_count() });
    }
    debug_assert_eq!(state.masked_count(), 0);
    Ok(DecodeOutput { tokens: state.tokens, trace })
}
