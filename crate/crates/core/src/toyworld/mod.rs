//! Synthetic symbol/duration/speaker feature world with exact ground truth,
//! task-sample builders and oracle readouts.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adaptation::TaskCondition;
use crate::error::{ensure, Result};
use crate::numerics::{DenseArray, RngStream};
use crate::quantizers::{sq_dist, SslTokenizer};
use crate::training::PromptPolicy;

mod readout;

pub use readout::{cosine, symbol_error_rate, symbols_from_tokens, Readout};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    /// Alphabet size `A`.
    pub alphabet: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub speakers: usize,
    pub d_feat: usize,
    /// Per-frame Gaussian noise standard deviation.
    pub sigma: f64,
    /// Per-dimension standard deviation of phoneme embeddings.
    pub phoneme_scale: f64,
    /// Per-dimension standard deviation of speaker offsets.
    pub speaker_scale: f64,
    /// Symbols per utterance, inclusive range.
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub seed: u64,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub reverb_prob: f64,
    pub reverb_window: usize,
    pub bandlimit_prob: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            alphabet: 16,
            min_duration: 2,
            max_duration: 4,
            speakers: 32,
            d_feat: 16,
            sigma: 0.05,
            phoneme_scale: 1.0,
            speaker_scale: 0.25,
            min_symbols: 4,
            max_symbols: 8,
            seed: 0,
            snr_db_min: -5.0,
            snr_db_max: 20.0,
            reverb_prob: 0.35,
            reverb_window: 3,
            bandlimit_prob: 0.25,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.alphabet >= 2, Argument, "alphabet needs at least 2 symbols");
        ensure!(self.speakers >= 2, Argument, "world needs at least 2 speakers");
        ensure!(self.d_feat >= 1, Argument, "d_feat must be positive");
        ensure!(1 <= self.min_duration && self.min_duration <= self.max_duration, Argument, "bad duration range");
        ensure!(1 <= self.min_symbols && self.min_symbols <= self.max_symbols, Argument, "bad symbol count range");
        ensure!(self.sigma >= 0.0 && self.sigma.is_finite(), Argument, "sigma must be finite and >= 0");
        ensure!(self.snr_db_min <= self.snr_db_max, Argument, "bad SNR range");
        ensure!((0.0..=1.0).contains(&self.reverb_prob) && (0.0..=1.0).contains(&self.bandlimit_prob), Argument, "degradation probabilities outside [0, 1]");
        ensure!(self.reverb_window >= 1, Argument, "reverb_window must be positive");
        Ok(())
    }

    /// Longest utterance in frames.
    pub fn max_frames(&self) -> usize {
        self.max_symbols * self.max_duration
    }
}

/// Conditional generation tasks of the toy world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Tts,
    Vc,
    Se,
    Tse,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Tts, Task::Vc, Task::Se, Task::Tse];

    pub fn name(self) -> &'static str {
        match self {
            Task::Tts => "tts",
            Task::Vc => "vc",
            Task::Se => "se",
            Task::Tse => "tse",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Whether samples of this task carry a target-speaker prompt.
    pub fn uses_prompt(self) -> bool {
        !matches!(self, Task::Se)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub symbols: Vec<u32>,
    pub durations: Vec<usize>,
    pub speaker: usize,
    /// `[n × d_feat]` clean features.
    pub features: DenseArray<f32>,
    /// The Gaussian part of `features`.
    pub noise: DenseArray<f32>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    /// Per-frame symbol labels.
    pub fn frame_symbols(&self) -> Vec<u32> {
        self.symbols.iter().zip(&self.durations).flat_map(|(&s, &d)| core::iter::repeat_n(s, d)).collect()
    }

    /// Frames covered by the first `k` symbols.
    pub fn frames_of_first(&self, k: usize) -> usize {
        self.durations[..k.min(self.durations.len())].iter().sum()
    }
}

/// Which degradations an SE condition received.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Degradation {
    pub snr_db: f64,
    pub reverb: bool,
    pub bandlimit: bool,
}

/// Fixed phoneme embeddings and speaker offsets drawn from the world seed.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// `[A × d_feat]`.
    pub phonemes: DenseArray<f32>,
    /// `[speakers × d_feat]`.
    pub speakers: DenseArray<f32>,
}

fn separated_table(rows: usize, d: usize, scale: f64, min_dist: f64, rng: &mut RngStream) -> Result<DenseArray<f32>> {
    let mut out: Vec<Vec<f32>> = Vec::with_capacity(rows);
    let mut attempts = 0;
    while out.len() < rows {
        attempts += 1;
        ensure!(attempts < 100_000, Argument, "cannot place {} vectors {} apart", rows, min_dist);
        let v: Vec<f32> = (0..d).map(|_| (scale * rng.normal()) as f32).collect();
        if out.iter().all(|u| (sq_dist(u, &v) as f64) >= min_dist * min_dist) {
            out.push(v);
        }
    }
    DenseArray::from_vec(&[rows, d], out.concat())
}

fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    libm::sqrt(x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64)
}

fn add_noise_against(x: &DenseArray<f32>, reference_rms: f64, snr_db: f64, rng: &mut RngStream) -> DenseArray<f32> {
    let z: Vec<f64> = (0..x.len()).map(|_| rng.normal()).collect();
    let z_rms = libm::sqrt(z.iter().map(|v| v * v).sum::<f64>() / z.len().max(1) as f64);
    let scale = reference_rms / (z_rms.max(f64::MIN_POSITIVE) * libm::pow(10.0, snr_db / 20.0));
    let mut out = x.clone();
    for (o, zi) in out.data_mut().iter_mut().zip(z) {
        *o += (scale * zi) as f32;
    }
    out
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        spec.validate()?;
        let root = RngStream::new(spec.seed);
        let sep = (4.0 * spec.sigma).max(f64::MIN_POSITIVE);
        let phonemes = separated_table(spec.alphabet, spec.d_feat, spec.phoneme_scale, sep, &mut root.fork("phonemes"))?;
        let speakers = separated_table(spec.speakers, spec.d_feat, spec.speaker_scale, sep, &mut root.fork("speakers"))?;
        Ok(Self { spec, phonemes, speakers })
    }

    pub fn phoneme(&self, s: u32) -> &[f32] {
        self.phonemes.row(s as usize)
    }

    pub fn speaker_offset(&self, s: usize) -> &[f32] {
        self.speakers.row(s)
    }

    /// Uniform symbols with no symbol repeated back to back, so run-length
    /// collapse of a frame readout recovers the sequence.
    pub fn draw_symbols(&self, k: usize, rng: &mut RngStream) -> Vec<u32> {
        let a = self.spec.alphabet;
        let mut out: Vec<u32> = Vec::with_capacity(k);
        for _ in 0..k {
            let s = match out.last() {
                None => rng.below(a),
                Some(&prev) => {
                    let s = rng.below(a - 1);
                    if s >= prev as usize { s + 1 } else { s }
                }
            };
            out.push(s as u32);
        }
        out
    }

    /// Renders `symbols` for `speaker` with fresh durations and noise.
    pub fn render(&self, symbols: &[u32], speaker: usize, rng: &mut RngStream) -> Result<Utterance> {
        ensure!(!symbols.is_empty(), Argument, "utterance needs k >= 1 symbols");
        ensure!(symbols.iter().all(|&s| (s as usize) < self.spec.alphabet), Domain, "symbol outside alphabet");
        ensure!(speaker < self.spec.speakers, Domain, "speaker {} outside world", speaker);
        let durations: Vec<usize> =
            symbols.iter().map(|_| rng.int_inclusive(self.spec.min_duration, self.spec.max_duration)).collect();
        self.render_with(symbols, &durations, speaker, rng)
    }

    fn render_with(&self, symbols: &[u32], durations: &[usize], speaker: usize, rng: &mut RngStream) -> Result<Utterance> {
        let d = self.spec.d_feat;
        let n: usize = durations.iter().sum();
        let mut features = DenseArray::zeros(&[n, d]);
        let mut noise = DenseArray::zeros(&[n, d]);
        let off = self.speaker_offset(speaker);
        let mut i = 0;
        for (&s, &dur) in symbols.iter().zip(durations) {
            let p = self.phoneme(s);
            for _ in 0..dur {
                let nz = noise.row_mut(i);
                for v in nz.iter_mut() {
                    *v = (self.spec.sigma * rng.normal()) as f32;
                }
                let nz = noise.row(i).to_vec();
                for (j, f) in features.row_mut(i).iter_mut().enumerate() {
                    *f = p[j] + off[j] + nz[j];
                }
                i += 1;
            }
        }
        Ok(Utterance { symbols: symbols.to_vec(), durations: durations.to_vec(), speaker, features, noise })
    }

    /// Random speaker, `k` symbols.
    pub fn gen_utterance(&self, k: usize, rng: &mut RngStream) -> Result<Utterance> {
        ensure!(k >= 1, Argument, "utterance needs k >= 1 symbols");
        let speaker = rng.below(self.spec.speakers);
        let symbols = self.draw_symbols(k, rng);
        self.render(&symbols, speaker, rng)
    }

    /// Random speaker and symbol count from the configured range.
    pub fn sample_utterance(&self, rng: &mut RngStream) -> Result<Utterance> {
        let k = rng.int_inclusive(self.spec.min_symbols, self.spec.max_symbols);
        self.gen_utterance(k, rng)
    }

    /// Concatenated clean features of random utterances totalling at least
    /// `frames` frames.
    pub fn frame_batch(&self, frames: usize, rng: &mut RngStream) -> Result<DenseArray<f32>> {
        let d = self.spec.d_feat;
        let mut data = Vec::new();
        while data.len() < frames.max(1) * d {
            data.extend_from_slice(self.sample_utterance(rng)?.features.data());
        }
        DenseArray::from_vec(&[data.len() / d, d], data)
    }

    /// Utterance of exactly `n` frames (the last symbol may be shortened).
    pub fn gen_frames(&self, n: usize, speaker: usize, rng: &mut RngStream) -> Result<Utterance> {
        ensure!(n >= 1, Argument, "frame count must be positive");
        let k = n.div_ceil(self.spec.min_duration);
        let symbols = self.draw_symbols(k, rng);
        let mut durations = Vec::new();
        let mut left = n;
        for _ in 0..k {
            if left == 0 {
                break;
            }
            let d = rng.int_inclusive(self.spec.min_duration, self.spec.max_duration).min(left);
            durations.push(d);
            left -= d;
        }
        self.render_with(&symbols[..durations.len()], &durations, speaker, rng)
    }

    /// Any speaker other than `speaker`.
    pub fn other_speaker(&self, speaker: usize, rng: &mut RngStream) -> usize {
        loop {
            let s = rng.below(self.spec.speakers);
            if s != speaker {
                return s;
            }
        }
    }

    /// Same symbols, durations and noise, spoken with `speaker`'s offset.
    pub fn revoice(&self, utt: &Utterance, speaker: usize) -> Result<DenseArray<f32>> {
        ensure!(speaker < self.spec.speakers, Domain, "speaker {} outside world", speaker);
        let (from, to) = (self.speaker_offset(utt.speaker), self.speaker_offset(speaker));
        let mut out = utt.features.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v += to[j] - from[j];
            }
        }
        Ok(out)
    }

    /// Adds Gaussian noise scaled so that the signal-to-noise power ratio is
    /// exactly `snr_db`, measured against the RMS of `signal`.
    pub fn add_noise(&self, signal: &DenseArray<f32>, snr_db: f64, rng: &mut RngStream) -> DenseArray<f32> {
        add_noise_against(signal, rms(signal.data()), snr_db, rng)
    }

    /// Causal moving average over `reverb_window` frames.
    pub fn reverb(&self, x: &DenseArray<f32>) -> DenseArray<f32> {
        let w = self.spec.reverb_window;
        let mut out = DenseArray::zeros(x.shape());
        for i in 0..x.rows() {
            let lo = (i + 1).saturating_sub(w);
            let inv = 1.0 / (i + 1 - lo) as f32;
            for r in lo..=i {
                let src = x.row(r).to_vec();
                for (o, v) in out.row_mut(i).iter_mut().zip(src) {
                    *o += v * inv;
                }
            }
        }
        out
    }

    /// Projects onto the leading `3/4` of the feature coordinates.
    pub fn bandlimit(&self, x: &DenseArray<f32>) -> DenseArray<f32> {
        let keep = (3 * self.spec.d_feat).div_ceil(4);
        let mut out = x.clone();
        for i in 0..out.rows() {
            for v in &mut out.row_mut(i)[keep..] {
                *v = 0.0;
            }
        }
        out
    }

    /// Reverb and band limiting with their probabilities, then noise at an SNR
    /// drawn uniformly from the configured range.
    pub fn degrade(&self, clean: &DenseArray<f32>, rng: &mut RngStream) -> (DenseArray<f32>, Degradation) {
        let reverb = rng.bernoulli(self.spec.reverb_prob);
        let bandlimit = rng.bernoulli(self.spec.bandlimit_prob);
        let snr_db = rng.uniform_range(self.spec.snr_db_min, self.spec.snr_db_max);
        let mut x = clean.clone();
        if reverb {
            x = self.reverb(&x);
        }
        if bandlimit {
            x = self.bandlimit(&x);
        }
        let out = add_noise_against(&x, rms(clean.data()), snr_db, rng);
        (out, Degradation { snr_db, reverb, bandlimit })
    }

    /// Sums two equal-length feature streams.
    pub fn mix(&self, target: &DenseArray<f32>, interferer: &DenseArray<f32>) -> Result<DenseArray<f32>> {
        ensure!(target.shape() == interferer.shape(), Argument, "mixture length {:?} vs {:?}", target.shape(), interferer.shape());
        let mut out = target.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(interferer.data()) {
            *o += v;
        }
        Ok(out)
    }
}

/// How the prompt prefix of a task sample is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PromptChoice {
    /// Random, per the pre-training prompt policy.
    Policy(PromptPolicy),
    /// The frames of the first `k` symbols.
    Symbols(usize),
    None,
}

/// One conditional-generation training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub task: Task,
    pub condition: TaskCondition,
    /// Target SSL tokens; the first `prompt_len` form the prompt.
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub utterance: Utterance,
    /// Symbols wholly inside the prompt, when the prompt is symbol aligned.
    pub prompt_symbols: Option<usize>,
}

impl TaskSample {
    /// Reference symbols for the generated (non-prompt) region, when known.
    pub fn reference(&self) -> &[u32] {
        &self.utterance.symbols[self.prompt_symbols.unwrap_or(0)..]
    }
}

/// Builds the condition for `task` from a target utterance. `interferer` is
/// required for TSE and must match the target length.
pub fn task_condition(
    task: Task,
    world: &World,
    utt: &Utterance,
    interferer: Option<&DenseArray<f32>>,
    text_guided: bool,
    rng: &mut RngStream,
) -> Result<TaskCondition> {
    Ok(match task {
        Task::Tts => TaskCondition::Symbols(utt.symbols.clone()),
        Task::Vc => {
            let other = world.other_speaker(utt.speaker, rng);
            TaskCondition::Frames(world.revoice(utt, other)?)
        }
        Task::Se => TaskCondition::Frames(world.degrade(&utt.features, rng).0),
        Task::Tse => {
            let owned;
            let intf = match interferer {
                Some(i) => i,
                None => {
                    let other = world.other_speaker(utt.speaker, rng);
                    owned = world.gen_frames(utt.frames(), other, rng)?.features;
                    &owned
                }
            };
            let mixture = world.mix(&utt.features, intf)?;
            if text_guided {
                TaskCondition::SymbolsAndFrames(utt.symbols.clone(), mixture)
            } else {
                TaskCondition::Frames(mixture)
            }
        }
    })
}

/// Task sample for a given utterance: tokenized clean target, prompt, condition.
pub fn build_task_sample(
    task: Task,
    utt: Utterance,
    world: &World,
    tokenizer: &SslTokenizer,
    prompt: PromptChoice,
    text_guided: bool,
    rng: &mut RngStream,
) -> Result<TaskSample> {
    let condition = task_condition(task, world, &utt, None, text_guided, rng)?;
    let tokens = tokenizer.tokens(&utt.features)?;
    let n = tokens.len();
    let (prompt_len, prompt_symbols) = if !task.uses_prompt() {
        (0, None)
    } else {
        match prompt {
            PromptChoice::Policy(p) => (p.draw(n, rng), None),
            PromptChoice::Symbols(k) => (utt.frames_of_first(k), Some(k.min(utt.symbols.len()))),
            PromptChoice::None => (0, Some(0)),
        }
    };
    ensure!(prompt_len <= n, Argument, "prompt longer than target");
    Ok(TaskSample { task, condition, tokens, prompt_len, utterance: utt, prompt_symbols })
}
