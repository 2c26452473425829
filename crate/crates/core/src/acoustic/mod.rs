//! Second-stage model: multi-layer RVQ acoustic tokens conditioned on SSL
//! tokens and an acoustic prompt, trained with random-layer masking and
//! decoded layer by layer.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::mgm::{iterative_decode, DecodeConfig, MaskState, Predictor, ScheduleConfig};
use crate::net::{Net, NetConfig, NetInputs};
use crate::numerics::{AdamW, AdamWConfig, DenseArray, ParamStore, Real, RngStream, Tape, Var};
use crate::training::plan_mask;

/// One training example: SSL tokens and the `[L × n]` acoustic tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticBatch {
    pub ssl_tokens: Vec<u32>,
    pub acoustic: Vec<Vec<u32>>,
    pub prompt_len: usize,
}

impl AcousticBatch {
    pub fn check(&self, depth: usize, vocab: usize) -> Result<()> {
        let n = self.ssl_tokens.len();
        ensure!(self.acoustic.len() == depth, Shape, "{} acoustic layers, expected {}", self.acoustic.len(), depth);
        ensure!(self.acoustic.iter().all(|l| l.len() == n), Shape, "acoustic layers must share length {}", n);
        ensure!(self.acoustic.iter().flatten().all(|&t| (t as usize) < vocab), Domain, "acoustic id outside codebook");
        ensure!(self.prompt_len <= n, Argument, "prompt exceeds sequence");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcousticConfig {
    pub net: NetConfig,
    pub depth: usize,
    pub ssl_vocab: usize,
    pub steps_per_layer: usize,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self { net: NetConfig { vocab_size: 64, ..NetConfig::default() }, depth: 4, ssl_vocab: 256, steps_per_layer: 4 }
    }
}

/// Shared network for all layers plus the conditioning tables.
#[derive(Clone, Debug)]
pub struct AcousticNet {
    pub net: Net,
    pub depth: usize,
    pub base_len: usize,
    pub ssl_embed: usize,
    pub layer_embed: usize,
    /// One embedding table per RVQ layer, used when that layer conditions a
    /// higher one.
    pub layer_tokens: Vec<usize>,
}

impl AcousticNet {
    pub fn build(cfg: &AcousticConfig, rng: &RngStream) -> Result<(Self, ParamStore<f32>)> {
        ensure!(cfg.depth >= 1, Argument, "acoustic depth must be >= 1");
        ensure!(cfg.ssl_vocab >= 1, Argument, "SSL vocabulary must be non-empty");
        let (net, mut store) = Net::build::<f32>(cfg.net, rng)?;
        let d = cfg.net.d_model;
        let base_len = store.len();
        let table = |store: &mut ParamStore<f32>, name: &str, rows: usize| -> Result<usize> {
            let mut r = rng.fork(name);
            let data = (0..rows * d).map(|_| r.normal() as f32).collect();
            Ok(store.push(name, DenseArray::from_vec(&[rows, d], data)?, true))
        };
        let ssl_embed = table(&mut store, "acoustic.ssl_embed", cfg.ssl_vocab)?;
        let layer_embed = table(&mut store, "acoustic.layer_embed", cfg.depth)?;
        let layer_tokens = (0..cfg.depth)
            .map(|l| table(&mut store, &format!("acoustic.tokens.{l}"), cfg.net.vocab_size))
            .collect::<Result<_>>()?;
        Ok((Self { net, depth: cfg.depth, base_len, ssl_embed, layer_embed, layer_tokens }, store))
    }

    pub fn vocab(&self) -> usize {
        self.net.config().vocab_size
    }

    pub fn mask_id(&self) -> u32 {
        self.net.mask_id()
    }

    /// Additive stream for layer `layer`: SSL embedding, layer-index embedding
    /// and the summed embeddings of every lower layer.
    pub fn condition<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        ssl: &[u32],
        lower: &[Vec<u32>],
        layer: usize,
    ) -> Result<Var> {
        ensure!(layer < self.depth, Domain, "layer {} outside depth {}", layer, self.depth);
        ensure!(lower.len() >= layer, Shape, "layer {} needs {} lower layers", layer, layer);
        let n = ssl.len();
        let mut h = tape.gather(vars[self.ssl_embed], ssl)?;
        let li = tape.gather(vars[self.layer_embed], &alloc::vec![layer as u32; n])?;
        h = tape.add(h, li)?;
        for (l, toks) in lower.iter().take(layer).enumerate() {
            ensure!(toks.len() == n, Shape, "lower layer {} has {} tokens for {}", l, toks.len(), n);
            let e = tape.gather(vars[self.layer_tokens[l]], toks)?;
            h = tape.add(h, e)?;
        }
        Ok(h)
    }

    /// Logits for `layer` given its current (masked) tokens.
    #[allow(clippy::too_many_arguments)]
    pub fn graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        ssl: &[u32],
        lower: &[Vec<u32>],
        layer: usize,
        current: &[u32],
        output_rows: Option<&[usize]>,
    ) -> Result<Var> {
        ensure!(current.len() == ssl.len(), Shape, "layer tokens {} vs SSL tokens {}", current.len(), ssl.len());
        let additive = Some(self.condition(tape, vars, ssl, lower, layer)?);
        self.net.graph(tape, &vars[..self.base_len], None, current, NetInputs { additive, prefix: None, output_rows })
    }

    pub fn forward(&self, params: &ParamStore<f32>, ssl: &[u32], lower: &[Vec<u32>], layer: usize, current: &[u32]) -> Result<DenseArray<f32>> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let out = self.graph(&mut tape, &vars, ssl, lower, layer, current, None)?;
        Ok(tape.to_array(out))
    }
}

#[derive(Clone, Debug)]
pub struct AcousticState {
    pub model: AcousticNet,
    pub params: ParamStore<f32>,
    pub opt: AdamW<f32>,
}

impl AcousticState {
    pub fn new(model: AcousticNet, params: ParamStore<f32>, optimizer: AdamWConfig) -> Self {
        let opt = AdamW::new(optimizer, &params);
        Self { model, params, opt }
    }
}

/// Uniform layer index in `[0, depth)`.
pub fn draw_layer(depth: usize, rng: &mut RngStream) -> usize {
    rng.below(depth)
}

/// Per-item draws made by [`acoustic_train_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticDraw {
    pub layer: usize,
    pub mask: Vec<bool>,
}

/// Random-layer masked step. Each item draws a layer `ℓ`, masks its
/// non-prompt tokens by the schedule and is scored on those positions only.
pub fn acoustic_train_step(
    state: &mut AcousticState,
    batch: &[AcousticBatch],
    horizon: f64,
    rng: &mut RngStream,
) -> Result<(f32, Vec<AcousticDraw>)> {
    ensure!(!batch.is_empty(), Argument, "empty training batch");
    let model = &state.model;
    let mask_id = model.mask_id();
    let mut tape = Tape::new();
    let vars = state.params.bind(&mut tape);
    let mut total = None;
    let mut draws = Vec::with_capacity(batch.len());
    for item in batch {
        item.check(model.depth, model.vocab())?;
        ensure!(!item.ssl_tokens.is_empty(), Argument, "empty acoustic example");
        let layer = draw_layer(model.depth, rng);
        let plan = plan_mask(item.ssl_tokens.len(), item.prompt_len, horizon, rng)?;
        let targets = &item.acoustic[layer];
        let rows: Vec<usize> = (0..targets.len()).filter(|&i| plan.mask[i]).collect();
        if !rows.is_empty() {
            let view = MaskState::from_targets(targets, &plan.mask, item.prompt_len, mask_id)?;
            let logits = model.graph(&mut tape, &vars, &item.ssl_tokens, &item.acoustic, layer, &view.tokens, Some(&rows))?;
            let t: Vec<u32> = rows.iter().map(|&i| targets[i]).collect();
            let loss = tape.cross_entropy(logits, &t, &alloc::vec![1.0; rows.len()])?;
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        draws.push(AcousticDraw { layer, mask: plan.mask });
    }
    let mut value = 0.0;
    let grads = match total {
        None => alloc::vec![None; vars.len()],
        Some(loss) => {
            let mean = tape.scale(loss, 1.0 / batch.len() as f32);
            value = tape.scalar(mean);
            ensure!(value.is_finite(), Numeric, "non-finite acoustic loss {}", value);
            let mut g = tape.backward(mean);
            vars.iter().map(|&v| g.take(v)).collect()
        }
    };
    state.opt.step(&mut state.params, &grads)?;
    Ok((value, draws))
}

/// Predicts logits of one layer given the layers below it.
pub trait LayerPredictor {
    fn predict_layer(&mut self, ssl: &[u32], lower: &[Vec<u32>], layer: usize, state: &MaskState) -> Result<DenseArray<f32>>;
}

pub struct AcousticPredictor<'a> {
    pub model: &'a AcousticNet,
    pub params: &'a ParamStore<f32>,
}

impl LayerPredictor for AcousticPredictor<'_> {
    fn predict_layer(&mut self, ssl: &[u32], lower: &[Vec<u32>], layer: usize, state: &MaskState) -> Result<DenseArray<f32>> {
        self.model.forward(self.params, ssl, lower, layer, &state.tokens)
    }
}

struct OneLayer<'p, 'd, P: ?Sized> {
    inner: &'p mut P,
    ssl: &'d [u32],
    lower: &'d [Vec<u32>],
    layer: usize,
}

impl<P: LayerPredictor + ?Sized> Predictor for OneLayer<'_, '_, P> {
    type Condition = ();

    fn predict(&mut self, state: &MaskState, _cond: Option<&()>) -> Result<DenseArray<f32>> {
        self.inner.predict_layer(self.ssl, self.lower, self.layer, state)
    }
}

/// Generates all layers in order. `prompt` is empty or holds `L` layers of
/// equal prompt length; the prompt region is copied into every layer.
#[allow(clippy::too_many_arguments)]
pub fn acoustic_generate<P: LayerPredictor + ?Sized>(
    predictor: &mut P,
    ssl: &[u32],
    prompt: &[Vec<u32>],
    depth: usize,
    mask_id: u32,
    steps_per_layer: usize,
    decode: &DecodeConfig,
    rng: &mut RngStream,
) -> Result<Vec<Vec<u32>>> {
    ensure!(prompt.is_empty() || prompt.len() == depth, Shape, "prompt has {} layers, expected {}", prompt.len(), depth);
    let p = prompt.first().map_or(0, Vec::len);
    ensure!(prompt.iter().all(|l| l.len() == p), Shape, "prompt layers differ in length");
    ensure!(p <= ssl.len(), Argument, "prompt of {} exceeds length {}", p, ssl.len());
    let sched = ScheduleConfig::with_steps(steps_per_layer);
    let mut layers: Vec<Vec<u32>> = Vec::with_capacity(depth);
    for layer in 0..depth {
        let pl: &[u32] = prompt.get(layer).map_or(&[], Vec::as_slice);
        let mut one = OneLayer { inner: &mut *predictor, ssl, lower: &layers, layer };
        let out = iterative_decode(&mut one, ssl.len(), pl, None, mask_id, decode, &sched, rng)?;
        layers.push(out.tokens);
    }
    Ok(layers)
}

#[cfg(test)]
mod tests;
