//! Token-stream files and their JSON sidecars.
//!
//! A stream file is a flat sequence of little-endian `u32` ids. The sidecar
//! records how the stream splits into utterances and, for corpora, the
//! symbols and speaker of each utterance for oracle evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, StreamError>;

pub fn encode_tokens(ids: &[u32]) -> Vec<u8> {
    ids.iter().flat_map(|t| t.to_le_bytes()).collect()
}

pub fn decode_tokens(bytes: &[u8]) -> Option<Vec<u32>> {
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_tokens(path: &Path, ids: &[u32]) -> Result<()> {
    std::fs::write(path, encode_tokens(ids)).map_err(|source| StreamError::Io { path: path.into(), source })
}

pub fn read_tokens(path: &Path) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path).map_err(|source| StreamError::Io { path: path.into(), source })?;
    decode_tokens(&bytes)
        .ok_or_else(|| StreamError::Format { path: path.into(), msg: format!("length {} is not a multiple of 4", bytes.len()) })
}

/// One utterance of a corpus stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    /// Frames per layer.
    pub frames: usize,
    pub symbols: Vec<u32>,
    pub speaker: usize,
    /// Unmasked prompt frames at the start, for generated streams.
    #[serde(default)]
    pub prompt_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    /// Token layers stored per utterance, layer-major within the utterance.
    pub layers: usize,
    pub vocab_size: usize,
    pub utterances: Vec<UtteranceRecord>,
}

impl Sidecar {
    pub fn total_tokens(&self) -> usize {
        self.utterances.iter().map(|u| u.frames * self.layers).sum()
    }

    /// Splits a stream into `[utterance][layer][frame]`.
    pub fn split(&self, ids: &[u32]) -> Option<Vec<Vec<Vec<u32>>>> {
        if ids.len() != self.total_tokens() || ids.iter().any(|&t| t as usize >= self.vocab_size) {
            return None;
        }
        let mut at = 0;
        Some(
            self.utterances
                .iter()
                .map(|u| {
                    (0..self.layers)
                        .map(|_| {
                            let s = ids[at..at + u.frames].to_vec();
                            at += u.frames;
                            s
                        })
                        .collect()
                })
                .collect(),
        )
    }
}

pub fn sidecar_path(stream: &Path) -> PathBuf {
    let mut s = stream.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `stream` and `stream.json`.
pub fn write_corpus(stream: &Path, sidecar: &Sidecar, utterances: &[Vec<Vec<u32>>]) -> Result<()> {
    let ids: Vec<u32> = utterances.iter().flatten().flatten().copied().collect();
    write_tokens(stream, &ids)?;
    let side = sidecar_path(stream);
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    std::fs::write(&side, text).map_err(|source| StreamError::Io { path: side, source })
}

pub fn read_corpus(stream: &Path) -> Result<(Sidecar, Vec<Vec<Vec<u32>>>)> {
    let side = sidecar_path(stream);
    let text = std::fs::read_to_string(&side).map_err(|source| StreamError::Io { path: side.clone(), source })?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| StreamError::Format { path: side.clone(), msg: e.to_string() })?;
    let ids = read_tokens(stream)?;
    let split = sidecar
        .split(&ids)
        .ok_or_else(|| StreamError::Format { path: stream.into(), msg: "stream does not match its sidecar".into() })?;
    Ok((sidecar, split))
}
