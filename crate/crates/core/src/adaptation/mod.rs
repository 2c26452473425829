//! Fine-tuning machinery: prefix and frame-level conditions, LoRA overlays
//! and condition dropout.
//!
//! Adaptation arrays live in the same [`ParamStore`] as the base network,
//! appended after the base arrays, so one optimizer and one checkpoint cover
//! the whole trainable set.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, ensure, Result};
use crate::net::{BoundLora, Net, NetInputs};
use crate::numerics::{DenseArray, ParamStore, Real, RngStream, Tape, Var};

/// Kind tag of a [`TaskCondition`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    None,
    NonFrameLevel,
    FrameLevel,
    /// Symbol prefix together with a frame-level stream.
    Composite,
}

/// Task condition `c`.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskCondition {
    None,
    /// Non-frame-level symbols, concatenated as a prefix.
    Symbols(Vec<u32>),
    /// Frame-level features `[m × d_c]`, interpolated and added to the input.
    Frames(DenseArray<f32>),
    SymbolsAndFrames(Vec<u32>, DenseArray<f32>),
}

impl TaskCondition {
    pub fn kind(&self) -> ConditionKind {
        match self {
            Self::None => ConditionKind::None,
            Self::Symbols(_) => ConditionKind::NonFrameLevel,
            Self::Frames(_) => ConditionKind::FrameLevel,
            Self::SymbolsAndFrames(..) => ConditionKind::Composite,
        }
    }

    pub fn symbols(&self) -> Option<&[u32]> {
        match self {
            Self::Symbols(s) | Self::SymbolsAndFrames(s, _) => Some(s),
            _ => None,
        }
    }

    pub fn frames(&self) -> Option<&DenseArray<f32>> {
        match self {
            Self::Frames(f) | Self::SymbolsAndFrames(_, f) => Some(f),
            _ => None,
        }
    }

    /// Length of the prefix this condition adds to the sequence.
    pub fn prefix_len(&self) -> usize {
        self.symbols().map_or(0, <[u32]>::len)
    }
}

/// Linear interpolation of `[m × d]` onto `n` rows with aligned endpoints.
/// Row `i` samples source coordinate `i·(m−1)/(n−1)`.
pub fn interp_align<T: Real>(features: &DenseArray<T>, n: usize) -> Result<DenseArray<T>> {
    let m = features.rows();
    ensure!(m > 0 && !features.is_empty(), Argument, "cannot align an empty condition");
    ensure!(n > 0, Argument, "target length must be positive");
    let d = features.cols();
    let mut out = DenseArray::zeros(&[n, d]);
    let den = if n > 1 { n - 1 } else { 1 };
    for i in 0..n {
        let num = if n > 1 { i * (m - 1) } else { 0 };
        let (lo, rem) = (num / den, num % den);
        let row = out.row_mut(i);
        if rem == 0 {
            row.copy_from_slice(features.row(lo));
        } else {
            let f = T::of(rem as f64 / den as f64);
            for ((o, &a), &b) in row.iter_mut().zip(features.row(lo)).zip(features.row(lo + 1)) {
                let v = a + f * (b - a);
                *o = v.max(a.min(b)).min(a.max(b));
            }
        }
    }
    Ok(out)
}

/// With probability `p_drop` replaces the condition by `None`.
pub fn condition_dropout(cond: &TaskCondition, p_drop: f64, rng: &mut RngStream) -> Result<TaskCondition> {
    ensure!((0.0..=1.0).contains(&p_drop), Argument, "p_drop {} outside [0, 1]", p_drop);
    Ok(if rng.bernoulli(p_drop) { TaskCondition::None } else { cond.clone() })
}

/// Weight matrices a LoRA overlay can target.
pub const LORA_TARGETS: [&str; 7] = ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSpec {
    pub rank: usize,
    /// Scale numerator; `None` means `2·rank`.
    pub alpha: Option<f64>,
    /// Matrix names from [`LORA_TARGETS`], applied in every block.
    pub targets: Vec<String>,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: None,
            targets: ["wq", "wk", "wv", "wo", "w_gate", "w_up"].iter().map(|s| String::from(*s)).collect(),
        }
    }
}

impl LoraSpec {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(2.0 * self.rank as f64)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.rank >= 1, Argument, "LoRA rank must be >= 1");
        ensure!(!self.targets.is_empty(), Argument, "LoRA needs at least one target");
        for t in &self.targets {
            ensure!(LORA_TARGETS.contains(&t.as_str()), Argument, "unknown LoRA target {:?}", t);
        }
        Ok(())
    }

    /// Closed-form count `Σ r·(d_in + d_out)` over targeted matrices.
    pub fn trainable_count(&self, net: &Net) -> usize {
        let c = net.config();
        let per_layer: usize = self
            .targets
            .iter()
            .map(|t| match t.as_str() {
                "w_gate" | "w_up" | "w_down" => c.d_model + c.d_ff,
                _ => 2 * c.d_model,
            })
            .sum();
        self.rank * per_layer * c.n_layers
    }
}

/// Indices of the LoRA pair adapting one base matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoraPair {
    pub base: usize,
    pub a: usize,
    pub b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraOverlay {
    pub spec: LoraSpec,
    pub pairs: Vec<LoraPair>,
    pub merged: bool,
}

impl LoraOverlay {
    pub fn scale(&self) -> f64 {
        self.spec.alpha() / self.spec.rank as f64
    }
}

/// Two-layer MLP adapter `W₂·gelu(W₁·x)`; `W₂` starts at zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameAdapter {
    pub w1: usize,
    pub w2: usize,
    pub d_cond: usize,
}

/// Layout of adaptation arrays appended to a base parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adaptation {
    /// Number of base-network arrays at the front of the store.
    pub base_len: usize,
    pub text_embed: Option<usize>,
    pub adapter: Option<FrameAdapter>,
    pub lora: Option<LoraOverlay>,
}

/// A network plus its adaptation layout.
#[derive(Clone, Debug)]
pub struct AdaptedNet {
    pub net: Net,
    pub adapt: Adaptation,
}

fn normal_array<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Result<DenseArray<T>> {
    DenseArray::from_vec(&[rows, cols], (0..rows * cols).map(|_| T::of(std * rng.normal())).collect())
}

impl AdaptedNet {
    pub fn new<T: Real>(net: Net, store: &ParamStore<T>) -> Result<Self> {
        net.check_params(store)?;
        let base_len = store.len();
        Ok(Self { net, adapt: Adaptation { base_len, text_embed: None, adapter: None, lora: None } })
    }

    /// Adds a symbol embedding table for prefix conditions.
    pub fn attach_text<T: Real>(&mut self, store: &mut ParamStore<T>, symbols: usize, rng: &RngStream) -> Result<()> {
        ensure!(self.adapt.text_embed.is_none(), State, "text embedding already attached");
        ensure!(symbols >= 1, Argument, "text vocabulary must be non-empty");
        let d = self.net.config().d_model;
        let table = normal_array(symbols, d, 1.0, &mut rng.fork("cond.text_embed"))?;
        self.adapt.text_embed = Some(store.push("cond.text_embed", table, true));
        Ok(())
    }

    /// Adds a frame adapter for `d_cond`-dimensional frame conditions.
    pub fn attach_adapter<T: Real>(&mut self, store: &mut ParamStore<T>, d_cond: usize, rng: &RngStream) -> Result<()> {
        ensure!(self.adapt.adapter.is_none(), State, "frame adapter already attached");
        ensure!(d_cond >= 1, Argument, "condition width must be positive");
        let d = self.net.config().d_model;
        let w1 = normal_array(d_cond, d, 1.0 / libm::sqrt(d_cond as f64), &mut rng.fork("cond.adapter.w1"))?;
        let w1 = store.push("cond.adapter.w1", w1, true);
        let w2 = store.push("cond.adapter.w2", DenseArray::zeros(&[d, d]), true);
        self.adapt.adapter = Some(FrameAdapter { w1, w2, d_cond });
        Ok(())
    }

    /// Attaches a LoRA overlay, freezing every base array. Returns the number
    /// of trainable LoRA values.
    pub fn attach_lora<T: Real>(&mut self, store: &mut ParamStore<T>, spec: &LoraSpec, rng: &RngStream) -> Result<usize> {
        spec.validate()?;
        ensure!(self.adapt.lora.is_none(), State, "LoRA overlay already attached");
        for i in 0..self.adapt.base_len {
            store.get_mut(i).trainable = false;
        }
        let r = spec.rank;
        let mut pairs = Vec::new();
        let mut count = 0;
        for layer in self.net.layout().layers.clone() {
            for (name, idx) in LORA_TARGETS.iter().zip(layer.projections()) {
                if !spec.targets.iter().any(|t| t == name) {
                    continue;
                }
                let base = store.get(idx);
                let (d_in, d_out) = (base.value.rows(), base.value.cols());
                let pname = base.name.clone();
                let a = normal_array(d_in, r, 1.0 / libm::sqrt(d_in as f64), &mut rng.fork(&format!("lora.{pname}.a")))?;
                let a = store.push(format!("lora.{pname}.a"), a, false);
                let b = store.push(format!("lora.{pname}.b"), DenseArray::zeros(&[r, d_out]), false);
                count += r * (d_in + d_out);
                pairs.push(LoraPair { base: idx, a, b });
            }
        }
        self.adapt.lora = Some(LoraOverlay { spec: spec.clone(), pairs, merged: false });
        Ok(count)
    }

    /// Folds `(alpha/r)·A·B` into the base matrices. Merging twice is an error.
    pub fn merge_lora<T: Real>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let Some(overlay) = self.adapt.lora.as_mut() else { bail!(State, "no LoRA overlay attached") };
        ensure!(!overlay.merged, State, "LoRA overlay already merged");
        let s = T::of(overlay.scale());
        for p in &overlay.pairs {
            let a = store.value(p.a).clone();
            let b = store.value(p.b).clone();
            let (d_in, r, d_out) = (a.rows(), a.cols(), b.cols());
            let mut delta = alloc::vec![T::zero(); d_in * d_out];
            crate::numerics::kernels::gemm_nn(a.data(), b.data(), &mut delta, d_in, r, d_out);
            let w = store.get_mut(p.base).value.data_mut();
            for (wi, di) in w.iter_mut().zip(delta) {
                *wi += s * di;
            }
        }
        overlay.merged = true;
        Ok(())
    }

    fn bound_lora<T: Real>(&self, vars: &[Var]) -> Option<BoundLora<T>> {
        let overlay = self.adapt.lora.as_ref().filter(|o| !o.merged)?;
        let mut bound: BoundLora<T> = alloc::vec![None; self.adapt.base_len];
        let s = T::of(overlay.scale());
        for p in &overlay.pairs {
            bound[p.base] = Some((vars[p.a], vars[p.b], s));
        }
        Some(bound)
    }

    /// Prefix rows for a non-frame-level condition: `[m × d_model]`.
    pub fn concat_condition<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], symbols: &[u32]) -> Result<Option<Var>> {
        if symbols.is_empty() {
            return Ok(None);
        }
        let Some(t) = self.adapt.text_embed else { bail!(State, "symbol condition without a text embedding") };
        let (rows, _) = tape.dims(vars[t]);
        ensure!(symbols.iter().all(|&s| (s as usize) < rows), Domain, "condition symbol outside table of {}", rows);
        tape.gather(vars[t], symbols).map(Some)
    }

    /// Additive stream `W₂·gelu(W₁·align(features))`: `[n × d_model]`.
    pub fn adapter_inject<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        features: &DenseArray<f32>,
        n: usize,
    ) -> Result<Var> {
        let Some(ad) = self.adapt.adapter else { bail!(State, "frame condition without an adapter") };
        ensure!(features.cols() == ad.d_cond, Shape, "condition width {} vs adapter {}", features.cols(), ad.d_cond);
        let aligned = interp_align(&features.cast::<T>(), n)?;
        let x = tape.leaf(&aligned, false);
        let h = tape.matmul(x, vars[ad.w1])?;
        let h = tape.gelu(h);
        tape.matmul(h, vars[ad.w2])
    }

    /// Records a conditioned forward pass; logits for `output_rows` (all
    /// targets when `None`).
    pub fn graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        tokens: &[u32],
        cond: &TaskCondition,
        output_rows: Option<&[usize]>,
    ) -> Result<Var> {
        let prefix = match cond.symbols() {
            Some(s) => self.concat_condition(tape, vars, s)?,
            None => None,
        };
        let additive = match cond.frames() {
            Some(f) => Some(self.adapter_inject(tape, vars, f, tokens.len())?),
            None => None,
        };
        let lora = self.bound_lora::<T>(vars);
        let base = &vars[..self.adapt.base_len];
        self.net.graph(tape, base, lora.as_ref(), tokens, NetInputs { additive, prefix, output_rows })
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, tokens: &[u32], cond: &TaskCondition) -> Result<DenseArray<T>> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let out = self.graph(&mut tape, &vars, tokens, cond, None)?;
        Ok(tape.to_array(out))
    }
}
