//! Unconditional prompt-prefix pre-training, task fine-tuning, multi-task
//! sampling and the shared masked-token training step.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adaptation::{condition_dropout, AdaptedNet, ConditionKind, TaskCondition};
use crate::error::{bail, ensure, Result};
use crate::mgm::{iterative_decode, mask_fraction, sample_mask, DecodeConfig, DecodeOutput, MaskState, Predictor, ScheduleConfig};
use crate::numerics::{AdamW, AdamWConfig, DenseArray, ParamStore, RngStream, Tape};
use crate::toyworld::Task;

/// Whether, and how long, an unmasked prompt prefix is drawn for a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptPolicy {
    /// Probability `p` that a sequence carries a prompt.
    pub prob: f64,
    /// Prefix length as a fraction of the sequence, drawn uniformly.
    pub range: [f64; 2],
}

impl Default for PromptPolicy {
    fn default() -> Self {
        Self { prob: 0.8, range: [0.0, 0.4] }
    }
}

/// Outcome of one prompt draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PromptDraw {
    pub prompted: bool,
    pub fraction: f64,
    pub len: usize,
}

impl PromptPolicy {
    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..=1.0).contains(&self.prob), Argument, "prompt probability {} outside [0, 1]", self.prob);
        let [lo, hi] = self.range;
        ensure!(0.0 <= lo && lo <= hi && hi <= 1.0, Argument, "prefix range [{}, {}] not within [0, 1]", lo, hi);
        Ok(())
    }

    pub fn draw_detail(&self, n: usize, rng: &mut RngStream) -> PromptDraw {
        if !rng.bernoulli(self.prob) {
            return PromptDraw { prompted: false, fraction: 0.0, len: 0 };
        }
        let fraction = rng.uniform_range(self.range[0], self.range[1]);
        let len = ((fraction * n as f64) as usize).min(n);
        PromptDraw { prompted: true, fraction, len }
    }

    pub fn draw(&self, n: usize, rng: &mut RngStream) -> usize {
        self.draw_detail(n, rng).len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub prompt: PromptPolicy,
    pub steps: u64,
    pub optimizer: AdamWConfig,
    /// Sequences are added to a batch until their token count reaches this.
    pub batch_tokens: usize,
    /// Schedule horizon `T`.
    pub horizon: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            prompt: PromptPolicy::default(),
            steps: 20_000,
            optimizer: AdamWConfig::default(),
            batch_tokens: 256,
            horizon: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.prompt.validate()?;
        ensure!(self.batch_tokens >= 1, Argument, "batch_tokens must be positive");
        ensure!(self.horizon > 0.0 && self.horizon.is_finite(), Argument, "horizon must be positive");
        ensure!(self.optimizer.lr > 0.0, Argument, "learning rate must be positive");
        Ok(())
    }
}

/// Masking of one training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub t: f64,
    pub prompt_len: usize,
    pub mask: Vec<bool>,
}

/// Draws `t` uniformly on `(0, T]` and masks the non-prompt positions with
/// probability `γ(t)`.
pub fn plan_mask(n: usize, prompt_len: usize, horizon: f64, rng: &mut RngStream) -> Result<MaskPlan> {
    let t = horizon * (1.0 - rng.uniform());
    plan_mask_at(n, prompt_len, t, horizon, rng)
}

/// [`plan_mask`] with a given schedule time `t`.
pub fn plan_mask_at(n: usize, prompt_len: usize, t: f64, horizon: f64, rng: &mut RngStream) -> Result<MaskPlan> {
    ensure!(prompt_len <= n, Argument, "prompt of {} exceeds length {}", prompt_len, n);
    let frac = mask_fraction(t, horizon)?;
    let mut mask = alloc::vec![false; n];
    mask[prompt_len..].copy_from_slice(&sample_mask(n - prompt_len, frac, rng));
    Ok(MaskPlan { t, prompt_len, mask })
}

/// One sequence of a training batch.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    pub prompt_len: usize,
    pub condition: TaskCondition,
}

/// Network, parameters and optimizer state being trained.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: AdaptedNet,
    pub params: ParamStore<f32>,
    pub opt: AdamW<f32>,
}

impl TrainState {
    pub fn new(model: AdaptedNet, params: ParamStore<f32>, optimizer: AdamWConfig) -> Self {
        let opt = AdamW::new(optimizer, &params);
        Self { model, params, opt }
    }

    pub fn step(&self) -> u64 {
        self.opt.state.step
    }
}

/// Batch-averaged masked loss followed by one optimizer step. Returns the loss.
pub fn masked_step(state: &mut TrainState, batch: &[TrainItem]) -> Result<f32> {
    ensure!(!batch.is_empty(), Argument, "empty training batch");
    let mask_id = state.model.net.mask_id();
    let mut tape = Tape::new();
    let vars = state.params.bind(&mut tape);
    let mut total = None;
    for item in batch {
        ensure!(item.targets.len() == item.mask.len(), Shape, "mask length mismatch");
        ensure!(item.mask[..item.prompt_len].iter().all(|&m| !m), State, "prompt position entered the loss mask");
        let rows: Vec<usize> = (0..item.mask.len()).filter(|&i| item.mask[i]).collect();
        if rows.is_empty() {
            continue;
        }
        let view = MaskState::from_targets(&item.targets, &item.mask, item.prompt_len, mask_id)?;
        let logits = state.model.graph(&mut tape, &vars, &view.tokens, &item.condition, Some(&rows))?;
        let targets: Vec<u32> = rows.iter().map(|&i| item.targets[i]).collect();
        let loss = tape.cross_entropy(logits, &targets, &alloc::vec![1.0; rows.len()])?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    let grads = match total {
        None => alloc::vec![None; vars.len()],
        Some(loss) => {
            let mean = tape.scale(loss, 1.0 / batch.len() as f32);
            let mut g = tape.backward(mean);
            let value = tape.scalar(mean);
            ensure!(value.is_finite(), Numeric, "non-finite loss {} at step {}", value, state.step());
            let grads: Vec<_> = vars.iter().map(|&v| g.take(v)).collect();
            state.opt.step(&mut state.params, &grads)?;
            ensure!(state.params.is_finite(), Numeric, "non-finite parameters after step {}", state.step());
            return Ok(value);
        }
    };
    state.opt.step(&mut state.params, &grads)?;
    Ok(0.0)
}

/// Draws sequences from `source` until `batch_tokens` tokens are collected.
pub fn fill_batch<S: FnMut(&mut RngStream) -> Result<Vec<u32>>>(
    batch_tokens: usize,
    source: &mut S,
    rng: &mut RngStream,
) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::new();
    let mut tokens = 0;
    while tokens < batch_tokens {
        let seq = source(rng)?;
        ensure!(!seq.is_empty(), Argument, "source produced an empty sequence");
        tokens += seq.len();
        out.push(seq);
    }
    Ok(out)
}

/// One unconditional pre-training step on `sequences`.
pub fn pretrain_step(state: &mut TrainState, sequences: &[Vec<u32>], cfg: &PretrainConfig, rng: &mut RngStream) -> Result<f32> {
    let mut batch = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let prompt_len = cfg.prompt.draw(seq.len(), rng);
        let plan = plan_mask(seq.len(), prompt_len, cfg.horizon, rng)?;
        batch.push(TrainItem { targets: seq.clone(), mask: plan.mask, prompt_len, condition: TaskCondition::None });
    }
    masked_step(state, &batch)
}

/// A fine-tuning task and its share of the multi-task mix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub task: Task,
    pub weight: f64,
    pub p_drop: f64,
    pub prompt: PromptPolicy,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self { task: Task::Tts, weight: 1.0, p_drop: 0.1, prompt: PromptPolicy::default() }
    }
}

impl TaskSpec {
    pub fn new(task: Task, weight: f64) -> Self {
        Self { task, weight, ..Default::default() }
    }

    /// Condition kinds this task accepts.
    pub fn accepts(&self, kind: ConditionKind) -> bool {
        matches!(
            (self.task, kind),
            (_, ConditionKind::None)
                | (Task::Tts, ConditionKind::NonFrameLevel)
                | (Task::Vc | Task::Se | Task::Tse, ConditionKind::FrameLevel)
                | (Task::Tse, ConditionKind::Composite)
        )
    }
}

/// The default multi-task mix over tts, vc, tse and se.
pub fn default_task_mix() -> Vec<TaskSpec> {
    alloc::vec![
        TaskSpec::new(Task::Tts, 0.5),
        TaskSpec::new(Task::Vc, 0.1),
        TaskSpec::new(Task::Tse, 0.2),
        TaskSpec::new(Task::Se, 0.2),
    ]
}

pub fn validate_weights(specs: &[TaskSpec]) -> Result<()> {
    ensure!(!specs.is_empty(), Argument, "no tasks");
    ensure!(specs.iter().all(|s| s.weight >= 0.0 && s.weight.is_finite()), Argument, "task weights must be non-negative");
    let sum: f64 = specs.iter().map(|s| s.weight).sum();
    ensure!((sum - 1.0).abs() <= 1e-9, Argument, "task proportions sum to {}, expected 1", sum);
    Ok(())
}

/// Categorical draw of a task index by weight.
pub fn multitask_draw(specs: &[TaskSpec], rng: &mut RngStream) -> Result<usize> {
    validate_weights(specs)?;
    let u = rng.uniform();
    let mut acc = 0.0;
    let last = specs.iter().rposition(|s| s.weight > 0.0).unwrap_or(0);
    for (i, s) in specs.iter().enumerate() {
        acc += s.weight;
        if u < acc && s.weight > 0.0 {
            return Ok(i);
        }
    }
    Ok(last)
}

/// A conditioned training example before masking.
#[derive(Clone, Debug)]
pub struct FinetuneExample {
    pub condition: TaskCondition,
    pub targets: Vec<u32>,
    pub prompt_len: usize,
}

/// One fine-tuning step: condition dropout, masking of non-prompt targets,
/// and an update of the trainable set only.
pub fn finetune_step(
    state: &mut TrainState,
    batch: &[FinetuneExample],
    task: &TaskSpec,
    horizon: f64,
    rng: &mut RngStream,
) -> Result<f32> {
    let mut items = Vec::with_capacity(batch.len());
    for ex in batch {
        ensure!(task.accepts(ex.condition.kind()), Argument, "{:?} condition for task {}", ex.condition.kind(), task.task.name());
        let condition = condition_dropout(&ex.condition, task.p_drop, rng)?;
        let plan = plan_mask(ex.targets.len(), ex.prompt_len, horizon, rng)?;
        items.push(TrainItem { targets: ex.targets.clone(), mask: plan.mask, prompt_len: ex.prompt_len, condition });
    }
    masked_step(state, &items)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f32,
    pub task: String,
}

impl core::fmt::Display for StepLog {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "step {} loss {} task {}", self.step, self.loss, self.task)
    }
}

/// [`Predictor`] over an adapted network.
pub struct ModelPredictor<'a> {
    pub model: &'a AdaptedNet,
    pub params: &'a ParamStore<f32>,
}

impl Predictor for ModelPredictor<'_> {
    type Condition = TaskCondition;

    fn predict(&mut self, state: &MaskState, cond: Option<&TaskCondition>) -> Result<DenseArray<f32>> {
        let cond = cond.unwrap_or(&TaskCondition::None);
        self.model.forward(self.params, &state.tokens, cond)
    }
}

/// Generates `length` tokens after `prompt` with the given condition.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    model: &AdaptedNet,
    params: &ParamStore<f32>,
    length: usize,
    prompt: &[u32],
    cond: &TaskCondition,
    decode: &DecodeConfig,
    sched: &ScheduleConfig,
    rng: &mut RngStream,
) -> Result<DecodeOutput> {
    let mut p = ModelPredictor { model, params };
    let c = match cond {
        TaskCondition::None => None,
        c => Some(c),
    };
    if length < prompt.len() {
        bail!(Argument, "prompt of {} exceeds length {}", prompt.len(), length);
    }
    iterative_decode(&mut p, length, prompt, c, model.net.mask_id(), decode, sched, rng)
}
