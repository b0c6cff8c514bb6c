//! Single-file parameter container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes   b"AIRDETPS"
//! version     u32       1
//! meta_len    u32
//! meta        meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! count       u32       number of parameters
//! per parameter, in ascending key order:
//!   key_len   u16
//!   key       key_len bytes UTF-8
//!   dtype     u8        1 = f64, 2 = f32
//!   ndim      u8
//!   dims      ndim x u32
//!   values    prod(dims) values of dtype
//! digest      32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Writers always emit `f64`; readers accept both tags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"AIRDETPS";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DTYPE_F32: u8 = 2;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub iteration: u64,
    /// Full model configuration the parameters were built for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, params: ParamSet) -> Self {
        Checkpoint { meta, params }
    }

    /// Identifier derived from the parameter content hash.
    pub fn id(&self) -> String {
        self.params.content_hash()[..16].to_string()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.meta, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, params) = decode(bytes)?;
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn encode(meta: &CheckpointMeta, params: &ParamSet) -> Result<Vec<u8>> {
    let meta_json = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + meta_json.len() + params.num_elements() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(meta_json.len()).map_err(|_| Error::Format("metadata too large".into()))?.to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (key, t) in params.iter() {
        let key_len = u16::try_from(key.len()).map_err(|_| Error::Format(format!("key too long: {key}")))?;
        let ndim = u8::try_from(t.shape().len()).map_err(|_| Error::Format(format!("rank too high: {key}")))?;
        out.extend_from_slice(&key_len.to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.push(DTYPE_F64);
        out.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large: {key}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
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
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses and verifies a container. Never panics on malformed input.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointMeta, ParamSet)> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN {
        return Err(Error::Format("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("digest mismatch".into()));
    }
    parse_body(body)
}

/// Parses the container body (everything before the digest) without verifying
/// the digest.
pub fn parse_body(body: &[u8]) -> Result<(CheckpointMeta, ParamSet)> {
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let count = r.u32()?;
    let mut params = ParamSet::new();
    let mut last_key: Option<String> = None;
    for _ in 0..count {
        let key_len = r.u16()? as usize;
        let key = std::str::from_utf8(r.take(key_len)?)
            .map_err(|_| Error::Format("key is not UTF-8".into()))?
            .to_string();
        if last_key.as_ref().is_some_and(|k| *k >= key) {
            return Err(Error::Format(format!("keys out of order or duplicated at `{key}`")));
        }
        let dtype = r.u8()?;
        let width = match dtype {
            DTYPE_F64 => 8,
            DTYPE_F32 => 4,
            other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
        };
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut n: usize = 1;
        for _ in 0..ndim {
            let d = r.u32()? as usize;
            n = n
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("shape overflow in `{key}`")))?;
            shape.push(d);
        }
        let nbytes = n
            .checked_mul(width)
            .filter(|&b| b <= r.remaining())
            .ok_or_else(|| Error::Format(format!("values of `{key}` exceed file")))?;
        let raw = r.take(nbytes)?;
        let data: Vec<f64> = if dtype == DTYPE_F64 {
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        } else {
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("`{key}`: {e}")))?;
        params.insert(key.clone(), t)?;
        last_key = Some(key);
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    Ok((meta, params))
}
