//! Saving and restoring trained components through [`Checkpoint`]s.

use serde::{Deserialize, Serialize};

use maskgen_core::acoustic::{AcousticConfig, AcousticNet, AcousticState};
use maskgen_core::adaptation::{AdaptedNet, LoraSpec};
use maskgen_core::net::{Net, NetConfig};
use maskgen_core::numerics::{AdamWConfig, ParamStore, RngStream};
use maskgen_core::quantizers::{AcousticTokenizer, Projection, QuantizerConfig, SslTokenizer};
use maskgen_core::training::TrainState;

use crate::checkpoint::{Checkpoint, CheckpointError, Result};
use crate::pipeline::Tokenizers;

/// Enough structure to rebuild an [`AdaptedNet`] before loading its values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelLayout {
    pub net: NetConfig,
    pub text_vocab: Option<usize>,
    pub d_cond: Option<usize>,
    pub lora: Option<LoraSpec>,
    pub lora_merged: bool,
}

impl ModelLayout {
    pub fn of(model: &AdaptedNet, params: &ParamStore<f32>) -> Self {
        let a = &model.adapt;
        Self {
            net: *model.net.config(),
            text_vocab: a.text_embed.map(|i| params.value(i).rows()),
            d_cond: a.adapter.map(|ad| ad.d_cond),
            lora: a.lora.as_ref().map(|o| o.spec.clone()),
            lora_merged: a.lora.as_ref().is_some_and(|o| o.merged),
        }
    }

    /// Fresh model and store with this layout; values are placeholders.
    pub fn build(&self) -> Result<(AdaptedNet, ParamStore<f32>)> {
        let rng = RngStream::new(0);
        let (net, mut store) = Net::build::<f32>(self.net, &rng)?;
        let mut model = AdaptedNet::new(net, &store)?;
        if let Some(v) = self.text_vocab {
            model.attach_text(&mut store, v, &rng)?;
        }
        if let Some(d) = self.d_cond {
            model.attach_adapter(&mut store, d, &rng)?;
        }
        if let Some(spec) = &self.lora {
            model.attach_lora(&mut store, spec, &rng)?;
            if self.lora_merged {
                if let Some(o) = model.adapt.lora.as_mut() {
                    o.merged = true;
                }
            }
        }
        Ok((model, store))
    }
}

fn layout_key(prefix: &str) -> String {
    format!("{prefix}layout")
}

fn put_json<T: Serialize>(ckpt: &mut Checkpoint, key: &str, value: &T) {
    if !ckpt.config.is_object() {
        ckpt.config = serde_json::Value::Object(Default::default());
    }
    ckpt.config[key] = serde_json::to_value(value).expect("layout serializes");
}

fn get_json<T: for<'de> Deserialize<'de>>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    let v = ckpt.config.get(key).ok_or_else(|| CheckpointError::Missing(format!("metadata entry {key}")))?;
    serde_json::from_value(v.clone()).map_err(|e| CheckpointError::Format(format!("metadata entry {key}: {e}")))
}

/// Model arrays, optimizer state and layout under `prefix`.
pub fn put_train_state(ckpt: &mut Checkpoint, prefix: &str, state: &TrainState) {
    put_json(ckpt, &layout_key(prefix), &ModelLayout::of(&state.model, &state.params));
    ckpt.put_params(&format!("{prefix}param/"), &state.params);
    ckpt.put_adamw(&format!("{prefix}opt/"), &state.opt, &state.params);
}

pub fn get_train_state(ckpt: &Checkpoint, prefix: &str, optimizer: AdamWConfig) -> Result<TrainState> {
    let layout: ModelLayout = get_json(ckpt, &layout_key(prefix))?;
    let (model, mut params) = layout.build()?;
    ckpt.get_params(&format!("{prefix}param/"), &mut params)?;
    let mut state = TrainState::new(model, params, optimizer);
    ckpt.get_adamw(&format!("{prefix}opt/"), &mut state.opt, &state.params)?;
    Ok(state)
}

/// Model arrays only, for a base the caller continues from with a new optimizer.
pub fn get_model(ckpt: &Checkpoint, prefix: &str) -> Result<(AdaptedNet, ParamStore<f32>)> {
    let layout: ModelLayout = get_json(ckpt, &layout_key(prefix))?;
    let (model, mut params) = layout.build()?;
    ckpt.get_params(&format!("{prefix}param/"), &mut params)?;
    Ok((model, params))
}

/// Stores only the LoRA arrays of `state`, so several task overlays can share one base.
pub fn put_lora_overlay(ckpt: &mut Checkpoint, prefix: &str, state: &TrainState) -> Result<()> {
    let Some(o) = &state.model.adapt.lora else {
        return Err(CheckpointError::Mismatch("model has no LoRA overlay".into()));
    };
    put_json(ckpt, &format!("{prefix}lora_spec"), &o.spec);
    for p in &o.pairs {
        for i in [p.a, p.b] {
            let param = state.params.get(i);
            ckpt.put_array(format!("{prefix}{}", param.name), &param.value);
        }
    }
    Ok(())
}

/// Attaches and fills a LoRA overlay from `ckpt` on top of a base model.
pub fn apply_lora_overlay(ckpt: &Checkpoint, prefix: &str, model: &mut AdaptedNet, params: &mut ParamStore<f32>) -> Result<()> {
    let spec: LoraSpec = get_json(ckpt, &format!("{prefix}lora_spec"))?;
    model.attach_lora(params, &spec, &RngStream::new(0))?;
    let pairs = model.adapt.lora.as_ref().map(|o| o.pairs.clone()).unwrap_or_default();
    for p in pairs {
        for i in [p.a, p.b] {
            let param = params.get_mut(i);
            let s = ckpt.section(&format!("{prefix}{}", param.name))?;
            if s.shape != param.value.shape() {
                return Err(CheckpointError::Mismatch(format!("overlay array {}", param.name)));
            }
            param.value.data_mut().copy_from_slice(&s.data);
        }
    }
    Ok(())
}

pub fn put_tokenizers(ckpt: &mut Checkpoint, cfg: &QuantizerConfig, tok: &Tokenizers) {
    put_json(ckpt, "quantizers", cfg);
    ckpt.put_projection("ssl/proj/", &tok.ssl.projection);
    ckpt.put_codebook("ssl/codebook/", &tok.ssl.codebook);
    ckpt.put_projection("acoustic/proj/", &tok.acoustic.projection);
    ckpt.put_rvq("acoustic/rvq/", &tok.acoustic.rvq);
}

pub fn get_tokenizers(ckpt: &Checkpoint, d_feat: usize) -> Result<(QuantizerConfig, Tokenizers)> {
    let cfg: QuantizerConfig = get_json(ckpt, "quantizers")?;
    let rng = RngStream::new(0);
    let mut sp = Projection::new(d_feat, cfg.ssl_dim, cfg.projection_lr, &rng)?;
    ckpt.get_projection("ssl/proj/", &mut sp)?;
    let mut ap = Projection::new(d_feat, cfg.rvq_dim, cfg.projection_lr, &rng)?;
    ckpt.get_projection("acoustic/proj/", &mut ap)?;
    let ssl = SslTokenizer { projection: sp, codebook: ckpt.get_codebook("ssl/codebook/")?, commit_weight: cfg.commit_weight };
    let acoustic = AcousticTokenizer { projection: ap, rvq: ckpt.get_rvq("acoustic/rvq/")?, commit_weight: cfg.commit_weight };
    Ok((cfg, Tokenizers { ssl, acoustic }))
}

pub fn put_acoustic_state(ckpt: &mut Checkpoint, prefix: &str, cfg: &AcousticConfig, state: &AcousticState) {
    put_json(ckpt, &layout_key(prefix), cfg);
    ckpt.put_params(&format!("{prefix}param/"), &state.params);
    ckpt.put_adamw(&format!("{prefix}opt/"), &state.opt, &state.params);
}

pub fn get_acoustic_state(ckpt: &Checkpoint, prefix: &str, optimizer: AdamWConfig) -> Result<(AcousticConfig, AcousticState)> {
    let cfg: AcousticConfig = get_json(ckpt, &layout_key(prefix))?;
    let (model, mut params) = AcousticNet::build(&cfg, &RngStream::new(0))?;
    ckpt.get_params(&format!("{prefix}param/"), &mut params)?;
    let mut state = AcousticState::new(model, params, optimizer);
    ckpt.get_adamw(&format!("{prefix}opt/"), &mut state.opt, &state.params)?;
    Ok((cfg, state))
}
