//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian: magic `MBQT`, `u16` version, `u32`
//! tensor count, then per tensor a `u16` name length, the UTF-8 name, a `u8`
//! rank, `rank` × `u32` dims, and the `f32` values. Run metadata lives in a
//! JSON sidecar next to the file (`<path>.meta.json`).

use std::path::{Path, PathBuf};

use bitadapt_tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{ModelKind, Params};
use crate::quant::BitwidthTask;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MBQT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u16 },
    #[error("checkpoint truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("checkpoint has {extra} trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("checkpoint tensor name is not UTF-8")]
    InvalidName,
    #[error("checkpoint tensor {name:?}: {reason}")]
    InvalidTensor { name: String, reason: String },
    #[error("checkpoint metadata {path}: {reason}")]
    Meta { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

pub fn encode_checkpoint(params: &Params) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        let invalid = |reason: &str| CheckpointError::InvalidTensor {
            name: name.clone(),
            reason: reason.into(),
        };
        let len = u16::try_from(name.len()).map_err(|_| invalid("name longer than 65535 bytes"))?;
        let rank = u8::try_from(t.rank()).map_err(|_| invalid("rank above 255"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| invalid("dimension above u32::MAX"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated {
                needed: end,
                found: self.bytes.len(),
            })?;
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Params> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let count = r.u32()?;
    let mut params = Params::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::InvalidName)?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 4)
            .ok_or(CheckpointError::Truncated {
                needed: usize::MAX,
                found: bytes.len(),
            })?;
        let raw = r.take(4 * numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| CheckpointError::InvalidTensor {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(CheckpointError::InvalidTensor {
                name,
                reason: "duplicate name".into(),
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes {
            extra: bytes.len() - r.pos,
        });
    }
    Ok(params)
}

/// Serialized generator position: seed, stream, and word offset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        use rand::SeedableRng;
        if self.seed.len() != 64 {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(self.seed.get(2 * i..2 * i + 2)?, 16).ok()?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u16,
    pub model_kind: ModelKind,
    pub width: usize,
    pub input_shape: [usize; 3],
    pub outputs: usize,
    pub engine: String,
    pub m: usize,
    /// Outer updates completed.
    pub epoch: u64,
    pub updates: u64,
    pub backprops_total: u64,
    pub inner_backprops_total: u64,
    pub tasks: Vec<BitwidthTask>,
    pub data_rng: RngState,
    pub task_rng: RngState,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.into(),
        source,
    }
}

pub fn write_checkpoint(path: &Path, params: &Params, meta: Option<&CheckpointMeta>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)?).map_err(io(path))?;
    if let Some(meta) = meta {
        let mp = meta_path(path);
        let json = serde_json::to_string_pretty(meta).map_err(|e| CheckpointError::Meta {
            path: mp.clone(),
            reason: e.to_string(),
        })?;
        std::fs::write(&mp, json + "\n").map_err(io(&mp))?;
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Params> {
    decode_checkpoint(&std::fs::read(path).map_err(io(path))?)
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp).map_err(io(&mp))?;
    serde_json::from_str(&text).map_err(|e| CheckpointError::Meta {
        path: mp,
        reason: e.to_string(),
    })
}
