//! The `MGMK` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MGMK" | version: u32 | meta_len: u64 | meta: JSON (meta_len bytes)
//!        | for each section: byte_len: u64 | f32 payload
//!        | crc32: u32 over every preceding byte
//! ```
//!
//! The JSON metadata carries the step count, RNG state, configuration,
//! integer counters and the name and shape of every section, in file order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use maskgen_core::numerics::{AdamW, DenseArray, ParamStore, RngState};
use maskgen_core::quantizers::{Codebook, Projection, RvqCodebook};

pub const MAGIC: [u8; 4] = *b"MGMK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("format error: bad magic {found:?} (expected \"MGMK\")")]
    BadMagic { found: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("version error: file has version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("corruption error: {0}")]
    Corruption(String),
    #[error("checkpoint has no section {0:?}")]
    Missing(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] maskgen_core::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// One named `f32` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct SectionMeta {
    name: String,
    shape: Vec<usize>,
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    step: u64,
    rng: Option<RngState>,
    config: serde_json::Value,
    counters: BTreeMap<String, u64>,
    sections: Vec<SectionMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rng: Option<RngState>,
    /// Free-form configuration document.
    pub config: serde_json::Value,
    pub counters: BTreeMap<String, u64>,
    pub sections: Vec<Section>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self { step: 0, rng: None, config: serde_json::Value::Null, counters: BTreeMap::new(), sections: Vec::new() }
    }
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(CheckpointError::Format(format!("truncated file while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_u64(bytes: &mut &[u8], what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, 8, what)?.try_into().unwrap()))
}

impl Checkpoint {
    pub fn put(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.sections.retain(|s| s.name != name);
        self.sections.push(Section { name, shape: shape.to_vec(), data });
    }

    pub fn put_array(&mut self, name: impl Into<String>, a: &DenseArray<f32>) {
        self.put(name, a.shape(), a.data().to_vec());
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections.iter().find(|s| s.name == name).ok_or_else(|| CheckpointError::Missing(name.into()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn array(&self, name: &str) -> Result<DenseArray<f32>> {
        let s = self.section(name)?;
        Ok(DenseArray::from_vec(&s.shape, s.data.clone())?)
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        self.counters.get(name).copied().ok_or_else(|| CheckpointError::Missing(format!("counter {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            step: self.step,
            rng: self.rng,
            config: self.config.clone(),
            counters: self.counters.clone(),
            sections: self
                .sections
                .iter()
                .map(|s| SectionMeta { name: s.name.clone(), shape: s.shape.clone(), bytes: 4 * s.data.len() as u64 })
                .collect(),
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let payload: usize = self.sections.iter().map(|s| 8 + 4 * s.data.len()).sum();
        let mut out = Vec::with_capacity(20 + meta.len() + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for s in &self.sections {
            out.extend_from_slice(&(4 * s.data.len() as u64).to_le_bytes());
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a container. Checks, in order: magic, version, CRC, layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Format(format!("file of {} bytes is too short", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic { found: String::from_utf8_lossy(&bytes[..4]).into_owned() });
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::Format("truncated header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(CheckpointError::Corruption(format!("CRC32 mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut rest = &body[8..];
        let meta_len = take_u64(&mut rest, "metadata length")? as usize;
        let meta: Meta = serde_json::from_slice(take(&mut rest, meta_len, "metadata")?)
            .map_err(|e| CheckpointError::Format(format!("metadata: {e}")))?;
        let mut sections = Vec::with_capacity(meta.sections.len());
        for m in meta.sections {
            let len = take_u64(&mut rest, &m.name)?;
            let count: usize = m.shape.iter().product();
            if len != m.bytes || len != 4 * count as u64 {
                return Err(CheckpointError::Format(format!(
                    "section {} declares {} bytes for shape {:?}, stored {len}",
                    m.name, m.bytes, m.shape
                )));
            }
            let raw = take(&mut rest, len as usize, &m.name)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            sections.push(Section { name: m.name, shape: m.shape, data });
        }
        if !rest.is_empty() {
            return Err(CheckpointError::Format(format!("{} trailing bytes after the last section", rest.len())));
        }
        Ok(Self { step: meta.step, rng: meta.rng, config: meta.config, counters: meta.counters, sections })
    }

    /// Writes atomically via a temporary file in the target directory.
    /// Returns the number of bytes written.
    pub fn save(&self, path: &Path) -> Result<usize> {
        let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        let bytes = self.to_bytes();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(&bytes).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(bytes.len())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }

    /// One section per parameter, named `prefix` + parameter name.
    pub fn put_params(&mut self, prefix: &str, params: &ParamStore<f32>) {
        for p in params.iter() {
            self.put_array(format!("{prefix}{}", p.name), &p.value);
        }
    }

    /// Copies values into an already laid out store; names and shapes must match.
    pub fn get_params(&self, prefix: &str, params: &mut ParamStore<f32>) -> Result<()> {
        for p in params.iter_mut() {
            let s = self.section(&format!("{prefix}{}", p.name))?;
            if s.shape != p.value.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{} has shape {:?} in the checkpoint, {:?} in the model",
                    p.name,
                    s.shape,
                    p.value.shape()
                )));
            }
            p.value.data_mut().copy_from_slice(&s.data);
        }
        Ok(())
    }

    /// Parameter arrays stored under `prefix`, in file order.
    pub fn params_under<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.name.starts_with(prefix))
    }

    pub fn put_adamw(&mut self, prefix: &str, opt: &AdamW<f32>, params: &ParamStore<f32>) {
        self.counters.insert(format!("{prefix}step"), opt.state.step);
        for ((p, m), v) in params.iter().zip(&opt.state.m).zip(&opt.state.v) {
            self.put(format!("{prefix}m/{}", p.name), &[m.len()], m.clone());
            self.put(format!("{prefix}v/{}", p.name), &[v.len()], v.clone());
        }
    }

    pub fn get_adamw(&self, prefix: &str, opt: &mut AdamW<f32>, params: &ParamStore<f32>) -> Result<()> {
        opt.state.step = self.counter(&format!("{prefix}step"))?;
        for (i, p) in params.iter().enumerate() {
            for (kind, dst) in [("m", &mut opt.state.m[i]), ("v", &mut opt.state.v[i])] {
                let s = self.section(&format!("{prefix}{kind}/{}", p.name))?;
                if s.data.len() != dst.len() {
                    return Err(CheckpointError::Mismatch(format!("optimizer {kind} for {}", p.name)));
                }
                dst.copy_from_slice(&s.data);
            }
        }
        Ok(())
    }

    pub fn put_codebook(&mut self, prefix: &str, cb: &Codebook) {
        self.put_array(format!("{prefix}codes"), &cb.codes);
        self.put(format!("{prefix}ema_counts"), &[cb.ema_counts.len()], cb.ema_counts.clone());
        self.put_array(format!("{prefix}ema_sums"), &cb.ema_sums);
        self.put(format!("{prefix}unused_steps"), &[cb.unused_steps.len()], cb.unused_steps.iter().map(|&u| u as f32).collect());
        self.put(format!("{prefix}decay"), &[1], vec![cb.decay]);
        self.counters.insert(format!("{prefix}dead_after"), cb.dead_after as u64);
    }

    pub fn get_codebook(&self, prefix: &str) -> Result<Codebook> {
        let mut cb = Codebook::new(self.array(&format!("{prefix}codes"))?)?;
        cb.ema_counts = self.section(&format!("{prefix}ema_counts"))?.data.clone();
        cb.ema_sums = self.array(&format!("{prefix}ema_sums"))?;
        cb.unused_steps = self.section(&format!("{prefix}unused_steps"))?.data.iter().map(|&u| u as u32).collect();
        cb.decay = self.section(&format!("{prefix}decay"))?.data[0];
        cb.dead_after = self.counter(&format!("{prefix}dead_after"))? as u32;
        if cb.ema_counts.len() != cb.size() || cb.unused_steps.len() != cb.size() || cb.ema_sums.shape() != cb.codes.shape() {
            return Err(CheckpointError::Mismatch(format!("codebook {prefix} arrays disagree in size")));
        }
        Ok(cb)
    }

    pub fn put_rvq(&mut self, prefix: &str, rvq: &RvqCodebook) {
        self.counters.insert(format!("{prefix}layers"), rvq.layers.len() as u64);
        for (l, cb) in rvq.layers.iter().enumerate() {
            self.put_codebook(&format!("{prefix}{l}/"), cb);
        }
    }

    pub fn get_rvq(&self, prefix: &str) -> Result<RvqCodebook> {
        let n = self.counter(&format!("{prefix}layers"))? as usize;
        let layers = (0..n).map(|l| self.get_codebook(&format!("{prefix}{l}/"))).collect::<Result<Vec<_>>>()?;
        Ok(RvqCodebook::new(layers)?)
    }

    pub fn put_projection(&mut self, prefix: &str, p: &Projection) {
        self.put_params(prefix, &p.params);
        self.put_adamw(&format!("{prefix}opt/"), &p.opt, &p.params);
    }

    /// Restores into a projection of the same dimensions.
    pub fn get_projection(&self, prefix: &str, p: &mut Projection) -> Result<()> {
        self.get_params(prefix, &mut p.params)?;
        self.get_adamw(&format!("{prefix}opt/"), &mut p.opt, &p.params)
    }
}

/// Human-readable summary used by `inspect-ckpt`.
pub fn describe(ckpt: &Checkpoint) -> String {
    let mut out = format!(
        "magic {}\nversion {}\nstep {}\nsections {}\n",
        String::from_utf8_lossy(&MAGIC),
        VERSION,
        ckpt.step,
        ckpt.sections.len()
    );
    for s in &ckpt.sections {
        let dims: Vec<String> = s.shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("  {} [{}]\n", s.name, dims.join("x")));
    }
    out
}
