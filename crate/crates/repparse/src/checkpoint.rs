//! Binary checkpoint:
//!
//! ```text
//! "RPPK" | u32 version | u32 count
//! count × ( u16 name_len | name | u8 ndim | ndim × u32 dim | f32 payload )
//! JSON {"config": ModelConfig, "step": u64, "flags": ParseFlags} to end of file
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use repparse_core::params::init_params;
use repparse_core::repparse::ParseFlags;
use repparse_core::{ModelConfig, ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RPPK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Trailer {
    config: ModelConfig,
    step: u64,
    #[serde(default)]
    flags: ParseFlags,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: ModelConfig,
    pub step: u64,
    pub flags: ParseFlags,
}

/// Rounds every parameter through `f32`, the storage precision.
pub fn quantize(params: &ParamStore) -> ParamStore {
    let mut out = params.clone();
    for t in out.tensors_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
    out
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, t) in ck.params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Usage(format!("parameter name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let trailer = Trailer { config: ck.config.clone(), step: ck.step, flags: ck.flags };
    buf.extend(serde_json::to_vec(&trailer).expect("plain data serializes"));
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at.checked_add(n)?)?;
        self.at += n;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::parse(path, msg);
    let mut r = Reader { bytes, at: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != VERSION {
        return Err(Error::parse(path, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32().ok_or_else(|| bad("truncated header"))?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u16().ok_or_else(|| bad("truncated tensor name"))? as usize;
        let name = r.take(len).ok_or_else(|| bad("truncated tensor name"))?;
        let name = std::str::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?.to_string();
        let ndim = r.u8().ok_or_else(|| bad("truncated shape"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32().ok_or_else(|| bad("truncated shape"))? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?);
        let payload = payload.ok_or_else(|| Error::parse(path, format!("truncated payload for {name}")))?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::parse(path, e))?;
        params.insert(&name, t);
    }
    let trailer: Trailer = serde_json::from_slice(&bytes[r.at..]).map_err(|e| Error::parse(path, format!("trailer: {e}")))?;
    trailer.config.validate().map_err(|e| Error::parse(path, e))?;
    params.check_compatible(&init_params(&trailer.config, 0)).map_err(|e| Error::parse(path, e))?;
    Ok(Checkpoint { params, config: trailer.config, step: trailer.step, flags: trailer.flags })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
