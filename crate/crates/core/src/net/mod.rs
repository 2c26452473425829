//! Bidirectional pre-norm transformer used as the masked-token predictor.
//!
//! Blocks are `h += Wo·attn(rope(Wq·n(h)), rope(Wk·n(h)), Wv·n(h))` followed by
//! `h += Wdown·(silu(Wgate·n(h)) ⊙ Wup·n(h))`, with RMS norm `n`, no biases and
//! no attention mask. Row `V` of the token embedding is the MASK embedding.
//!
//! Conditioning enters in two ways: an additive per-position stream added to
//! the token embeddings, and a prefix of already-embedded rows prepended to
//! the sequence. Prefix and targets share one position index space.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{DenseArray, ParamStore, Real, RngStream, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub rope_base: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { d_model: 128, n_layers: 4, n_heads: 4, d_ff: 512, vocab_size: 256, max_len: 512, rope_base: 10_000.0 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.d_model > 0 && self.n_heads > 0, Argument, "d_model and n_heads must be positive");
        ensure!(self.d_model % self.n_heads == 0, Argument, "d_model {} not divisible by {} heads", self.d_model, self.n_heads);
        ensure!((self.d_model / self.n_heads) % 2 == 0, Argument, "head dimension must be even for rotary encoding");
        ensure!(self.vocab_size >= 2, Argument, "vocabulary needs at least 2 tokens");
        ensure!(self.d_ff > 0 && self.max_len > 0, Argument, "d_ff and max_len must be positive");
        ensure!(self.rope_base > 1.0, Argument, "rope_base must exceed 1");
        Ok(())
    }

    /// `(V+1)·d + L·(2d + 4d² + 3·d·d_ff) + d + d·V`
    pub fn param_count(&self) -> usize {
        let (d, v, f, l) = (self.d_model, self.vocab_size, self.d_ff, self.n_layers);
        (v + 1) * d + l * (2 * d + 4 * d * d + 3 * d * f) + d + d * v
    }

    pub fn mask_id(&self) -> u32 {
        self.vocab_size as u32
    }
}

/// Parameter indices of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

impl LayerLayout {
    /// Attention and feed-forward projection matrices.
    pub fn projections(&self) -> [usize; 7] {
        [self.wq, self.wk, self.wv, self.wo, self.w_gate, self.w_up, self.w_down]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetLayout {
    pub embed: usize,
    pub layers: Vec<LayerLayout>,
    pub final_norm: usize,
    pub head: usize,
}

/// Architecture plus parameter layout; weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    cfg: NetConfig,
    layout: NetLayout,
}

/// Per-parameter low-rank deltas bound on a tape: `x·W + s·(x·A)·B`.
pub type BoundLora<T> = Vec<Option<(Var, Var, T)>>;

/// Conditioning inputs for one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct NetInputs<'a> {
    /// `[n × d_model]` added to the token embeddings.
    pub additive: Option<Var>,
    /// `[m × d_model]` rows prepended to the sequence.
    pub prefix: Option<Var>,
    /// Target rows to produce logits for; all `n` when `None`.
    pub output_rows: Option<&'a [usize]>,
}

fn expected_shapes(cfg: &NetConfig) -> Vec<(alloc::string::String, [usize; 2], bool)> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut out = Vec::new();
    out.push((format!("embed"), [v + 1, d], true));
    for i in 0..cfg.n_layers {
        out.push((format!("layers.{i}.attn_norm"), [1, d], false));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("layers.{i}.{w}"), [d, d], true));
        }
        out.push((format!("layers.{i}.ffn_norm"), [1, d], false));
        out.push((format!("layers.{i}.w_gate"), [d, f], true));
        out.push((format!("layers.{i}.w_up"), [d, f], true));
        out.push((format!("layers.{i}.w_down"), [f, d], true));
    }
    out.push((format!("final_norm"), [1, d], false));
    out.push((format!("head"), [d, v], true));
    out
}

impl Net {
    /// Architecture for `cfg` with the canonical parameter order.
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let per_layer = 9;
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let b = 1 + i * per_layer;
                LayerLayout {
                    attn_norm: b,
                    wq: b + 1,
                    wk: b + 2,
                    wv: b + 3,
                    wo: b + 4,
                    ffn_norm: b + 5,
                    w_gate: b + 6,
                    w_up: b + 7,
                    w_down: b + 8,
                }
            })
            .collect();
        let final_norm = 1 + cfg.n_layers * per_layer;
        Ok(Self { cfg, layout: NetLayout { embed: 0, layers, final_norm, head: final_norm + 1 } })
    }

    /// Deterministic initialization from `rng`; each array draws from its own fork.
    pub fn build<T: Real>(cfg: NetConfig, rng: &RngStream) -> Result<(Self, ParamStore<T>)> {
        let net = Self::new(cfg)?;
        let depth_scale = 1.0 / libm::sqrt(2.0 * cfg.n_layers.max(1) as f64);
        let mut store = ParamStore::new();
        for (name, shape, decay) in expected_shapes(&cfg) {
            let mut r = rng.fork(&name);
            let n = shape[0] * shape[1];
            let data: Vec<T> = if name.ends_with("norm") {
                alloc::vec![T::one(); n]
            } else {
                let std = if name == "embed" {
                    1.0
                } else {
                    let fan_in = shape[0] as f64;
                    let s = 1.0 / libm::sqrt(fan_in);
                    if name.ends_with("wo") || name.ends_with("w_down") {
                        s * depth_scale
                    } else {
                        s
                    }
                };
                (0..n).map(|_| T::of(std * r.normal())).collect()
            };
            store.push(name, DenseArray::from_vec(&shape, data)?, decay);
        }
        debug_assert_eq!(store.count(), cfg.param_count());
        Ok((net, store))
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &NetLayout {
        &self.layout
    }

    pub fn mask_id(&self) -> u32 {
        self.cfg.mask_id()
    }

    /// Checks names and shapes of a loaded or foreign store.
    pub fn check_params<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        let exp = expected_shapes(&self.cfg);
        ensure!(exp.len() == store.len(), Shape, "expected {} arrays, found {}", exp.len(), store.len());
        for ((name, shape, _), p) in exp.iter().zip(store.iter()) {
            ensure!(&p.name == name, Shape, "expected array {}, found {}", name, p.name);
            ensure!(p.value.shape() == shape, Shape, "array {} has shape {:?}, expected {:?}", name, p.value.shape(), shape);
        }
        Ok(())
    }

    fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, lora: Option<(Var, Var, T)>) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        match lora {
            None => Ok(y),
            Some((a, b, s)) => {
                let xa = tape.matmul(x, a)?;
                let xab = tape.matmul(xa, b)?;
                let delta = tape.scale(xab, s);
                tape.add(y, delta)
            }
        }
    }

    /// Records the forward pass; returns `[rows × V]` logits.
    pub fn graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        lora: Option<&BoundLora<T>>,
        tokens: &[u32],
        inputs: NetInputs<'_>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let n = tokens.len();
        ensure!(n > 0, Argument, "empty token sequence");
        ensure!(params.len() == expected_shapes(cfg).len(), Shape, "bound {} params", params.len());
        ensure!(tokens.iter().all(|&t| t <= cfg.mask_id()), Domain, "token id above mask id {}", cfg.mask_id());
        let m = inputs.prefix.map_or(0, |p| tape.dims(p).0);
        ensure!(n + m <= cfg.max_len, Argument, "sequence of {} + prefix {} exceeds max_len {}", n, m, cfg.max_len);
        let lw = |i: usize| lora.and_then(|l| l.get(i).copied().flatten());
        let mut h = tape.gather(params[self.layout.embed], tokens)?;
        if let Some(a) = inputs.additive {
            ensure!(tape.dims(a) == (n, cfg.d_model), Shape, "additive condition {:?}", tape.dims(a));
            h = tape.add(h, a)?;
        }
        if let Some(p) = inputs.prefix {
            ensure!(tape.dims(p).1 == cfg.d_model, Shape, "prefix width {}", tape.dims(p).1);
            h = tape.concat_rows(p, h)?;
        }
        for l in &self.layout.layers {
            let x = tape.rms_norm(h, params[l.attn_norm])?;
            let q = Self::linear(tape, x, params[l.wq], lw(l.wq))?;
            let k = Self::linear(tape, x, params[l.wk], lw(l.wk))?;
            let v = Self::linear(tape, x, params[l.wv], lw(l.wv))?;
            let q = tape.rope(q, cfg.n_heads, cfg.rope_base)?;
            let k = tape.rope(k, cfg.n_heads, cfg.rope_base)?;
            let a = tape.attention(q, k, v, cfg.n_heads)?;
            let o = Self::linear(tape, a, params[l.wo], lw(l.wo))?;
            h = tape.add(h, o)?;
            let x = tape.rms_norm(h, params[l.ffn_norm])?;
            let g = Self::linear(tape, x, params[l.w_gate], lw(l.w_gate))?;
            let u = Self::linear(tape, x, params[l.w_up], lw(l.w_up))?;
            let s = tape.swiglu(g, u)?;
            let dn = Self::linear(tape, s, params[l.w_down], lw(l.w_down))?;
            h = tape.add(h, dn)?;
        }
        let rows: Vec<usize> = match inputs.output_rows {
            Some(r) => {
                ensure!(r.iter().all(|&i| i < n), Domain, "output row outside sequence");
                r.iter().map(|&i| i + m).collect()
            }
            None => (m..m + n).collect(),
        };
        let h = tape.select_rows(h, &rows)?;
        let h = tape.rms_norm(h, params[self.layout.final_norm])?;
        tape.matmul(h, params[self.layout.head])
    }

    /// Plain forward pass returning `[n × V]` logits.
    pub fn forward<T: Real>(
        &self,
        params: &ParamStore<T>,
        tokens: &[u32],
        additive: Option<&DenseArray<T>>,
        prefix: Option<&DenseArray<T>>,
    ) -> Result<DenseArray<T>> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let additive = additive.map(|a| tape.leaf(a, false));
        let prefix = prefix.filter(|p| p.rows() > 0 && !p.is_empty()).map(|p| tape.leaf(p, false));
        let out = self.graph(&mut tape, &vars, None, tokens, NetInputs { additive, prefix, output_rows: None })?;
        Ok(tape.to_array(out))
    }
}
