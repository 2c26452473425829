//! The JSON run configuration.
//!
//! Every section has defaults, so `{"seed": 0}` is a complete config.
//! Unknown keys anywhere are rejected. Overrides of the form `a.b=value`
//! are applied to the parsed document before it is typed; `value` is read
//! as JSON and falls back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use maskgen_core::net::NetConfig;
use maskgen_core::numerics::AdamWConfig;
use maskgen_core::quantizers::QuantizerConfig;
use maskgen_core::toyworld::WorldSpec;
use maskgen_core::training::{default_task_mix, validate_weights, PretrainConfig, PromptPolicy, TaskSpec};

use crate::pipeline::{AcousticTrainConfig, DecodeSection, FinetuneConfig};

/// Pre-training knobs; the seed comes from the top-level `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub prompt: PromptPolicy,
    pub steps: u64,
    pub optimizer: AdamWConfig,
    pub batch_tokens: usize,
    pub horizon: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self { prompt: p.prompt, steps: p.steps, optimizer: p.optimizer, batch_tokens: p.batch_tokens, horizon: p.horizon }
    }
}

impl PretrainSection {
    pub fn with_seed(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            prompt: self.prompt,
            steps: self.steps,
            optimizer: self.optimizer,
            batch_tokens: self.batch_tokens,
            horizon: self.horizon,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub samples: usize,
    /// Prompt each sample with the frames of its first `k` symbols.
    pub prompt_symbols: Option<usize>,
    /// Evaluate tse with the text prefix added to the mixture.
    pub text_guided: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { samples: 100, prompt_symbols: Some(1), text_guided: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding every artifact of a run.
    pub dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { dir: PathBuf::from("run") }
    }
}

impl Paths {
    pub fn world(&self) -> PathBuf {
        self.dir.join("world.json")
    }
    pub fn tokenizers(&self) -> PathBuf {
        self.dir.join("tokenizers.ckpt")
    }
    pub fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.tok")
    }
    pub fn pretrain(&self) -> PathBuf {
        self.dir.join("pretrain.ckpt")
    }
    pub fn finetune(&self) -> PathBuf {
        self.dir.join("finetune.ckpt")
    }
    pub fn acoustic(&self) -> PathBuf {
        self.dir.join("acoustic.ckpt")
    }
    pub fn generated(&self) -> PathBuf {
        self.dir.join("generated.tok")
    }
    pub fn generated_acoustic(&self) -> PathBuf {
        self.dir.join("generated_acoustic.tok")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub quantizers: QuantizerConfig,
    pub net: NetConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneConfig,
    pub tasks: Vec<TaskSpec>,
    pub acoustic: AcousticTrainConfig,
    pub decode: DecodeSection,
    pub eval: EvalSection,
    pub paths: Paths,
    /// Utterances written by `train-codebooks` as the token corpus.
    pub corpus_utterances: usize,
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            quantizers: QuantizerConfig::default(),
            net: NetConfig { d_model: 64, n_layers: 2, n_heads: 4, d_ff: 128, vocab_size: 256, max_len: 64, rope_base: 10_000.0 },
            pretrain: PretrainSection::default(),
            finetune: FinetuneConfig::default(),
            tasks: default_task_mix(),
            acoustic: AcousticTrainConfig::default(),
            decode: DecodeSection::default(),
            eval: EvalSection::default(),
            paths: Paths::default(),
            corpus_utterances: 1000,
            seed: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    #[error("bad override {0:?}: expected key.path=value")]
    Override(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

/// What the configuration is about to be used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Any,
    /// Training or generation; the seed must be given.
    Seeded,
    /// Fine-tuning; additionally needs a task list.
    Finetune,
}

/// Sets `path` (dot separated, numeric parts index arrays) to `value`.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.into()))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(spec.into()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut cur = doc;
    for part in key.split('.') {
        let index = part.parse::<usize>().ok().filter(|_| cur.is_array());
        cur = match index {
            Some(i) => {
                let items = cur.as_array_mut().unwrap();
                if i >= items.len() {
                    return Err(ConfigError::Override(format!("{spec} (index {i} out of range)")));
                }
                &mut items[i]
            }
            None => {
                if !cur.is_object() {
                    *cur = Value::Object(Default::default());
                }
                cur.as_object_mut().unwrap().entry(part).or_insert(Value::Null)
            }
        };
    }
    *cur = value;
    Ok(())
}

fn fill_defaults_for_override(doc: &mut Value, key: &str) {
    // Array overrides need the default array present before indexing into it.
    let top = key.split('.').next().unwrap_or_default();
    if let (Some(obj), Ok(defaults)) = (doc.as_object_mut(), serde_json::to_value(RunConfig::default())) {
        if !obj.contains_key(top) {
            if let Some(v) = defaults.get(top).filter(|v| v.is_array()) {
                obj.insert(top.into(), v.clone());
            }
        }
    }
}

impl RunConfig {
    /// Parses a document, applies overrides and validates for `purpose`.
    pub fn from_json(text: &str, origin: &Path, overrides: &[String], purpose: Purpose) -> Result<Self, ConfigError> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse { path: origin.into(), msg: e.to_string() })?;
        if !doc.is_object() {
            return Err(ConfigError::Parse { path: origin.into(), msg: "top level must be a JSON object".into() });
        }
        for o in overrides {
            fill_defaults_for_override(&mut doc, o.split('=').next().unwrap_or_default());
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| ConfigError::Parse { path: origin.into(), msg: e.to_string() })?;
        let errors = cfg.violations(purpose);
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    pub fn load(path: &Path, overrides: &[String], purpose: Purpose) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::from_json(&text, path, overrides, purpose)
    }

    /// Every violation, prefixed with the section it belongs to.
    pub fn violations(&self, purpose: Purpose) -> Vec<String> {
        let mut errs = Vec::new();
        let check = |errs: &mut Vec<String>, section: &str, r: maskgen_core::Result<()>| {
            if let Err(e) = r {
                errs.push(format!("{section}: {e}"));
            }
        };
        check(&mut errs, "world", self.world.validate());
        check(&mut errs, "quantizers", self.quantizers.validate());
        check(&mut errs, "net", self.net.validate());
        check(&mut errs, "pretrain", self.pretrain.with_seed(0).validate());
        check(&mut errs, "acoustic.net", self.acoustic.net.validate());
        check(&mut errs, "decode", self.decode.sampling.validate());
        check(&mut errs, "decode", self.decode.schedule().validate());
        if let Some(l) = &self.finetune.lora {
            check(&mut errs, "finetune.lora", l.validate());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            check(&mut errs, &format!("tasks.{i}"), t.prompt.validate());
            if !(0.0..=1.0).contains(&t.p_drop) {
                errs.push(format!("tasks.{i}: p_drop {} outside [0, 1]", t.p_drop));
            }
        }
        if purpose == Purpose::Finetune || !self.tasks.is_empty() {
            if let Err(e) = validate_weights(&self.tasks) {
                errs.push(format!("tasks: {e}"));
            }
        }
        let frames = self.world.max_frames();
        let prefix = self.world.max_symbols;
        if self.net.max_len < frames + prefix {
            errs.push(format!(
                "net.max_len {} is below the longest conditioned sequence ({} frames + {} condition symbols)",
                self.net.max_len, frames, prefix
            ));
        }
        if self.acoustic.net.max_len < frames {
            errs.push(format!("acoustic.net.max_len {} is below the longest utterance of {frames} frames", self.acoustic.net.max_len));
        }
        for (name, d) in [("ssl_dim", self.quantizers.ssl_dim), ("rvq_dim", self.quantizers.rvq_dim)] {
            if d > self.world.d_feat {
                errs.push(format!("quantizers.{name} {d} exceeds world.d_feat {}", self.world.d_feat));
            }
        }
        if self.eval.samples == 0 {
            errs.push("eval.samples must be positive".into());
        }
        if self.corpus_utterances == 0 {
            errs.push("corpus_utterances must be positive".into());
        }
        if purpose != Purpose::Any && self.seed.is_none() {
            errs.push("seed is required for training and generation".into());
        }
        errs
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}
