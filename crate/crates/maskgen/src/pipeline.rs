//! End-to-end toy-world experiment: tokenizers, pre-training, fine-tuning,
//! the acoustic stage and evaluation.
//!
//! Every training step draws its data from `seed`-rooted streams forked by
//! step index, so a run is a pure function of its configuration and resuming
//! from a checkpoint continues the exact same sequence of batches.

use serde::{Deserialize, Serialize};

use maskgen_core::acoustic::{
    acoustic_generate, acoustic_train_step, AcousticBatch, AcousticConfig, AcousticNet, AcousticPredictor, AcousticState,
};
use maskgen_core::adaptation::{AdaptedNet, LoraSpec, TaskCondition};
use maskgen_core::mgm::{DecodeConfig, ScheduleConfig};
use maskgen_core::net::{Net, NetConfig};
use maskgen_core::numerics::{AdamWConfig, DenseArray, RngStream};
use maskgen_core::quantizers::{AcousticTokenizer, QuantizerConfig, SslTokenizer};
use maskgen_core::toyworld::{build_task_sample, symbol_error_rate, PromptChoice, Readout, Task, TaskSample, Utterance, World};
use maskgen_core::training::{
    fill_batch, finetune_step, generate, multitask_draw, pretrain_step, FinetuneExample, PretrainConfig, StepLog, TaskSpec,
    TrainState,
};
use maskgen_core::Result;

/// Callback receiving one metrics-log entry per training step.
pub type Logger<'a> = &'a mut dyn FnMut(&StepLog);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub optimizer: AdamWConfig,
    pub batch_tokens: usize,
    /// Freeze the base and train a LoRA overlay instead of all weights.
    pub lora: Option<LoraSpec>,
    /// Size of the finite labeled corpus; `None` draws fresh utterances.
    pub corpus_utterances: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 2_000,
            optimizer: AdamWConfig::default(),
            batch_tokens: 256,
            lora: None,
            corpus_utterances: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcousticTrainConfig {
    pub net: NetConfig,
    pub steps: u64,
    pub optimizer: AdamWConfig,
    pub batch_tokens: usize,
    pub steps_per_layer: usize,
}

impl Default for AcousticTrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig { d_model: 64, n_layers: 2, n_heads: 4, d_ff: 128, vocab_size: 64, max_len: 64, rope_base: 10_000.0 },
            steps: 2_000,
            optimizer: AdamWConfig::default(),
            batch_tokens: 256,
            steps_per_layer: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub steps: usize,
    #[serde(flatten)]
    pub sampling: DecodeConfig,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self { steps: 16, sampling: DecodeConfig::default() }
    }
}

impl DecodeSection {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig::with_steps(self.steps)
    }
}

/// A trained tokenizer pair.
#[derive(Clone, Debug)]
pub struct Tokenizers {
    pub ssl: SslTokenizer,
    pub acoustic: AcousticTokenizer,
}

pub fn train_tokenizers(world: &World, cfg: &QuantizerConfig, seed: u64, log: Logger<'_>) -> Result<Tokenizers> {
    cfg.validate()?;
    let root = RngStream::new(seed).fork("tokenizers");
    let first = world.frame_batch(cfg.batch_frames, &mut root.fork("init"))?;
    let mut ssl = SslTokenizer::init(cfg, &first, &root)?;
    let mut acoustic = AcousticTokenizer::init(cfg, &first, &root)?;
    for step in 0..cfg.steps as u64 {
        let mut r = root.fork_index("step", step);
        let batch = world.frame_batch(cfg.batch_frames, &mut r)?;
        let s = ssl.train_step(&batch, &mut r)?;
        let a = acoustic.train_step(&batch, &mut r)?;
        log(&StepLog { step: step + 1, loss: s.recon_loss, task: "ssl_vq".into() });
        log(&StepLog { step: step + 1, loss: a.recon_loss, task: "rvq".into() });
    }
    Ok(Tokenizers { ssl, acoustic })
}

/// Fresh network with the vocabulary of `tokenizer`.
pub fn build_model(net: &NetConfig, tokenizer: &SslTokenizer, seed: u64, label: &str) -> Result<(AdaptedNet, maskgen_core::numerics::ParamStore<f32>)> {
    let cfg = NetConfig { vocab_size: tokenizer.vocab_size(), ..*net };
    let (net, store) = Net::build::<f32>(cfg, &RngStream::new(seed).fork(label))?;
    Ok((AdaptedNet::new(net, &store)?, store))
}

/// Runs pre-training steps `state.step()..until`.
pub fn pretrain(
    state: &mut TrainState,
    world: &World,
    tokenizer: &SslTokenizer,
    cfg: &PretrainConfig,
    until: u64,
    log: Logger<'_>,
) -> Result<()> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed).fork("pretrain");
    let mut source = |r: &mut RngStream| -> Result<Vec<u32>> { tokenizer.tokens(&world.sample_utterance(r)?.features) };
    while state.step() < until {
        let step = state.step();
        let mut r = root.fork_index("step", step);
        let seqs = fill_batch(cfg.batch_tokens, &mut source, &mut r)?;
        let loss = pretrain_step(state, &seqs, cfg, &mut r)?;
        log(&StepLog { step: step + 1, loss, task: "pretrain".into() });
    }
    Ok(())
}

/// Attaches the condition modules (and LoRA when configured) for fine-tuning.
pub fn prepare_finetune(
    model: AdaptedNet,
    mut params: maskgen_core::numerics::ParamStore<f32>,
    world: &World,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<TrainState> {
    let mut model = model;
    let rng = RngStream::new(seed).fork("adaptation");
    model.attach_text(&mut params, world.spec.alphabet, &rng)?;
    model.attach_adapter(&mut params, world.spec.d_feat, &rng)?;
    if let Some(spec) = &cfg.lora {
        model.attach_lora(&mut params, spec, &rng)?;
    }
    Ok(TrainState::new(model, params, cfg.optimizer))
}

/// Fixed labeled corpus drawn once from the seed.
pub fn labeled_corpus(world: &World, size: usize, seed: u64) -> Result<Vec<Utterance>> {
    let mut r = RngStream::new(seed).fork("labeled-corpus");
    (0..size).map(|_| world.sample_utterance(&mut r)).collect()
}

/// Runs fine-tuning steps `state.step()..until` over the task mix.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    state: &mut TrainState,
    world: &World,
    tokenizer: &SslTokenizer,
    tasks: &[TaskSpec],
    cfg: &FinetuneConfig,
    horizon: f64,
    seed: u64,
    until: u64,
    log: Logger<'_>,
) -> Result<()> {
    let root = RngStream::new(seed).fork("finetune");
    let corpus = match cfg.corpus_utterances {
        Some(n) => Some(labeled_corpus(world, n, seed)?),
        None => None,
    };
    while state.step() < until {
        let step = state.step();
        let mut r = root.fork_index("step", step);
        let spec = tasks[multitask_draw(tasks, &mut r)?];
        let mut batch = Vec::new();
        let mut tokens = 0;
        while tokens < cfg.batch_tokens {
            let utt = match &corpus {
                Some(c) => c[r.below(c.len())].clone(),
                None => world.sample_utterance(&mut r)?,
            };
            let s = build_task_sample(spec.task, utt, world, tokenizer, PromptChoice::Policy(spec.prompt), false, &mut r)?;
            tokens += s.tokens.len() + s.condition.prefix_len();
            batch.push(FinetuneExample { condition: s.condition, targets: s.tokens, prompt_len: s.prompt_len });
        }
        let loss = finetune_step(state, &batch, &spec, horizon, &mut r)?;
        log(&StepLog { step: step + 1, loss, task: spec.task.name().into() });
    }
    Ok(())
}

/// Aggregate evaluation metrics for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub symbol_error_rate: f64,
    pub speaker_similarity: f64,
    pub n_samples: usize,
}

/// How evaluation samples are built.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSpec {
    pub task: Task,
    pub samples: usize,
    /// Prompt with the frames of the first `k` symbols, or no prompt.
    pub prompt_symbols: Option<usize>,
    pub text_guided: bool,
    /// Evaluate the model unconditionally (condition dropped).
    pub unconditional: bool,
    pub seed: u64,
}

impl EvalSpec {
    pub fn new(task: Task, samples: usize, seed: u64) -> Self {
        Self { task, samples, prompt_symbols: None, text_guided: false, unconditional: false, seed }
    }
}

/// Held-out evaluation samples; the stream is disjoint from training streams.
pub fn eval_samples(world: &World, tokenizer: &SslTokenizer, spec: &EvalSpec) -> Result<Vec<TaskSample>> {
    let mut r = RngStream::new(spec.seed).fork("eval").fork(spec.task.name());
    (0..spec.samples)
        .map(|_| {
            let utt = world.sample_utterance(&mut r)?;
            let prompt = match spec.prompt_symbols {
                Some(k) => PromptChoice::Symbols(k),
                None => PromptChoice::None,
            };
            build_task_sample(spec.task, utt, world, tokenizer, prompt, spec.text_guided, &mut r)
        })
        .collect()
}

/// One generated sample with its per-sample metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub tokens: Vec<u32>,
    pub symbols: Vec<u32>,
    pub symbol_error_rate: f64,
    pub speaker_similarity: f64,
}

/// Generates the non-prompt region of `sample` and scores it.
pub fn generate_sample(
    model: &AdaptedNet,
    params: &maskgen_core::numerics::ParamStore<f32>,
    readout: &Readout,
    tokenizer: &SslTokenizer,
    sample: &TaskSample,
    unconditional: bool,
    decode: &DecodeSection,
    rng: &mut RngStream,
) -> Result<Generated> {
    let cond = if unconditional { TaskCondition::None } else { sample.condition.clone() };
    let prompt = &sample.tokens[..sample.prompt_len];
    let out = generate(model, params, sample.tokens.len(), prompt, &cond, &decode.sampling, &decode.schedule(), rng)?;
    let region = &out.tokens[sample.prompt_len..];
    let feats = tokenizer.decode_tokens(region)?;
    let symbols = readout.symbols(&feats);
    Ok(Generated {
        symbol_error_rate: symbol_error_rate(&symbols, sample.reference()),
        speaker_similarity: readout.speaker_similarity(&feats, sample.utterance.speaker),
        symbols,
        tokens: out.tokens,
    })
}

pub fn evaluate(
    model: &AdaptedNet,
    params: &maskgen_core::numerics::ParamStore<f32>,
    world: &World,
    tokenizer: &SslTokenizer,
    spec: &EvalSpec,
    decode: &DecodeSection,
) -> Result<(EvalReport, Vec<Generated>)> {
    let readout = Readout::for_tokens(world, tokenizer)?;
    let samples = eval_samples(world, tokenizer, spec)?;
    let mut rng = RngStream::new(spec.seed).fork("eval-decode");
    let mut out = Vec::with_capacity(samples.len());
    for s in &samples {
        out.push(generate_sample(model, params, &readout, tokenizer, s, spec.unconditional, decode, &mut rng)?);
    }
    let n = out.len().max(1) as f64;
    let report = EvalReport {
        task: spec.task.name().into(),
        symbol_error_rate: out.iter().map(|g| g.symbol_error_rate).sum::<f64>() / n,
        speaker_similarity: out.iter().map(|g| g.speaker_similarity).sum::<f64>() / n,
        n_samples: out.len(),
    };
    Ok((report, out))
}

/// Scores the reference tokens of each sample as if they were generated.
pub fn evaluate_oracle(world: &World, tokenizer: &SslTokenizer, spec: &EvalSpec) -> Result<EvalReport> {
    let readout = Readout::for_tokens(world, tokenizer)?;
    let samples = eval_samples(world, tokenizer, spec)?;
    let (mut ser, mut sim) = (0.0, 0.0);
    for s in &samples {
        let feats = tokenizer.decode_tokens(&s.tokens[s.prompt_len..])?;
        ser += symbol_error_rate(&readout.symbols(&feats), s.reference());
        sim += readout.speaker_similarity(&feats, s.utterance.speaker);
    }
    let n = samples.len().max(1) as f64;
    Ok(EvalReport { task: spec.task.name().into(), symbol_error_rate: ser / n, speaker_similarity: sim / n, n_samples: samples.len() })
}

/// Acoustic training example from one utterance.
pub fn acoustic_example(tok: &Tokenizers, utt: &Utterance, prompt_len: usize) -> Result<AcousticBatch> {
    Ok(AcousticBatch { ssl_tokens: tok.ssl.tokens(&utt.features)?, acoustic: tok.acoustic.tokens(&utt.features)?, prompt_len })
}

pub fn build_acoustic(cfg: &AcousticTrainConfig, tok: &Tokenizers, seed: u64) -> Result<(AcousticConfig, AcousticState)> {
    let acfg = AcousticConfig {
        net: NetConfig { vocab_size: tok.acoustic.layer_vocab(), ..cfg.net },
        depth: tok.acoustic.depth(),
        ssl_vocab: tok.ssl.vocab_size(),
        steps_per_layer: cfg.steps_per_layer,
    };
    let (model, params) = AcousticNet::build(&acfg, &RngStream::new(seed).fork("acoustic-net"))?;
    Ok((acfg, AcousticState::new(model, params, cfg.optimizer)))
}

/// Runs acoustic training steps up to `until`.
pub fn train_acoustic(
    state: &mut AcousticState,
    world: &World,
    tok: &Tokenizers,
    cfg: &AcousticTrainConfig,
    prompt: &maskgen_core::training::PromptPolicy,
    horizon: f64,
    seed: u64,
    until: u64,
    log: Logger<'_>,
) -> Result<()> {
    let root = RngStream::new(seed).fork("acoustic");
    while state.opt.state.step < until {
        let step = state.opt.state.step;
        let mut r = root.fork_index("step", step);
        let mut batch = Vec::new();
        let mut tokens = 0;
        while tokens < cfg.batch_tokens {
            let utt = world.sample_utterance(&mut r)?;
            let p = prompt.draw(utt.frames(), &mut r);
            tokens += utt.frames();
            batch.push(acoustic_example(tok, &utt, p)?);
        }
        let (loss, _) = acoustic_train_step(state, &batch, horizon, &mut r)?;
        log(&StepLog { step: step + 1, loss, task: "acoustic".into() });
    }
    Ok(())
}

/// SSL tokens → acoustic tokens → features.
pub fn synthesize(
    state: &AcousticState,
    tok: &Tokenizers,
    ssl_tokens: &[u32],
    prompt: &[Vec<u32>],
    steps_per_layer: usize,
    decode: &DecodeConfig,
    rng: &mut RngStream,
) -> Result<(Vec<Vec<u32>>, DenseArray<f32>)> {
    let mut p = AcousticPredictor { model: &state.model, params: &state.params };
    let layers = acoustic_generate(&mut p, ssl_tokens, prompt, state.model.depth, state.model.mask_id(), steps_per_layer, decode, rng)?;
    let feats = tok.acoustic.decode_tokens(&layers)?;
    Ok((layers, feats))
}
