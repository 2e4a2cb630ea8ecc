//! Binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SEMITACO"
//! version    u32
//! header_len u64
//! header     JSON, header_len bytes
//! n_blocks   u32
//! block*     name_len u32 | name utf-8 | ndim u32 | dims u64 * ndim | data f64 * prod(dims)
//! checksum   SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamConfig, AdamState, ParameterSet};
use super::tensor::Tensor;
use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 8] = b"SEMITACO";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// JSON header plus an ordered list of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorBlocks {
    pub header: serde_json::Value,
    pub blocks: Vec<(String, Tensor)>,
}

impl TensorBlocks {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(
            64 + header.len() + self.blocks.iter().map(|(n, t)| n.len() + 8 * t.numel() + 32).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a tensor-block file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(Error::Integrity("file truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch (truncated or corrupted file)".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let header_len = r.u64()? as usize;
        let header = serde_json::from_slice(r.take(header_len)?)?;
        let n = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Integrity("tensor name is not utf-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Integrity("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blocks.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after last block".into()));
        }
        Ok(Self { header, blocks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).at(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes()?).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).at(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Serialized training state shared between pre-training and fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form label, e.g. `"pretrained-decoder"` or `"finetuned"`.
    pub tag: String,
    /// Model configuration snapshot.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub params: ParameterSet,
    pub adam: Option<AdamState>,
    pub step: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tag: String,
    config: serde_json::Value,
    config_hash: String,
    frozen: Vec<String>,
    adam: Option<AdamHeader>,
    step: u64,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    t: u64,
}

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

impl Checkpoint {
    pub fn to_blocks(&self) -> Result<TensorBlocks> {
        let header = Header {
            tag: self.tag.clone(),
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            frozen: self.params.frozen().iter().cloned().collect(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                config: a.config,
                t: a.t,
            }),
            step: self.step,
            seed: self.seed,
        };
        let mut blocks: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (format!("{PARAM}{n}"), t.clone()))
            .collect();
        if let Some(a) = &self.adam {
            blocks.extend(a.m.iter().map(|(n, t)| (format!("{ADAM_M}{n}"), t.clone())));
            blocks.extend(a.v.iter().map(|(n, t)| (format!("{ADAM_V}{n}"), t.clone())));
        }
        Ok(TensorBlocks {
            header: serde_json::to_value(header)?,
            blocks,
        })
    }

    pub fn from_blocks(tb: TensorBlocks) -> Result<Self> {
        let header: Header = serde_json::from_value(tb.header)?;
        let mut params = ParameterSet::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in tb.blocks {
            if let Some(n) = name.strip_prefix(PARAM) {
                params.insert(n, t)?;
            } else if let Some(n) = name.strip_prefix(ADAM_M) {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(ADAM_V) {
                v.insert(n.to_string(), t);
            } else {
                return Err(Error::Integrity(format!("unknown block `{name}`")));
            }
        }
        for f in &header.frozen {
            params.freeze(f);
        }
        let adam = header.adam.map(|a| AdamState {
            config: a.config,
            t: a.t,
            m,
            v,
        });
        Ok(Self {
            tag: header.tag,
            config: header.config,
            config_hash: header.config_hash,
            params,
            adam,
            step: header.step,
            seed: header.seed,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_blocks()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_blocks(TensorBlocks::from_bytes(bytes)?)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.to_blocks()?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_blocks(TensorBlocks::read(path)?)
}
