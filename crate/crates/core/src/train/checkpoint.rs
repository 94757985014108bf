//! Binary checkpoints.
//!
//! Layout: 8 magic bytes, format version (u32 LE), header length (u32 LE),
//! a JSON header listing config, metadata and entries (name, shape, offset
//! in elements), the little-endian f32 payload, then a CRC32 of everything
//! before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, OptimizerState};
use crate::adapters::{AdapterStackPolicy, Phase};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CODEADPT";
pub const FORMAT_VERSION: u32 = 1;

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Option<Phase>,
    pub step: u64,
    pub seed: u64,
    pub policy: Option<AdapterStackPolicy>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    optimizer: Option<OptimHeader>,
    entries: Vec<Entry>,
}

pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Tensor)> = ck.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    if let Some(o) = &ck.optimizer {
        tensors.extend(o.m.iter().map(|(n, t)| (format!("{M_PREFIX}{n}"), t)));
        tensors.extend(o.v.iter().map(|(n, t)| (format!("{V_PREFIX}{n}"), t)));
    }
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in &tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = Header {
        config: ck.config.clone(),
        meta: ck.meta.clone(),
        optimizer: ck.optimizer.as_ref().map(|o| OptimHeader {
            config: o.config,
            step: o.step,
        }),
        entries,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let fail = |m: String| Error::Checkpoint(m);
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fail("not a checkpoint (bad magic bytes)".into()));
    }
    if bytes.len() < 20 {
        return Err(fail("checksum error: file truncated".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fail(format!("version mismatch: file v{version}, supported v{FORMAT_VERSION}")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(fail("checksum error: file truncated or corrupted".into()));
    }
    let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    if 16 + hlen > body.len() {
        return Err(fail("header length exceeds file".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[16..16 + hlen]).map_err(|e| fail(format!("bad header: {e}")))?;
    let payload = &body[16 + hlen..];
    if payload.len() % 4 != 0 {
        return Err(fail("payload is not a whole number of f32 values".into()));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let mut params = ParamStore::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for e in header.entries {
        let n: usize = e.shape.iter().product();
        let data = floats
            .get(e.offset..e.offset + n)
            .ok_or_else(|| fail(format!("entry {} runs past the payload", e.name)))?
            .to_vec();
        let t = Tensor::new(e.shape, data)?;
        if let Some(rest) = e.name.strip_prefix(M_PREFIX) {
            m.insert(rest.to_string(), t);
        } else if let Some(rest) = e.name.strip_prefix(V_PREFIX) {
            v.insert(rest.to_string(), t);
        } else {
            params.insert(e.name, t);
        }
    }
    let optimizer = header.optimizer.map(|o| OptimizerState {
        config: o.config,
        step: o.step,
        m,
        v,
    });
    Ok(Checkpoint {
        config: header.config,
        params,
        optimizer,
        meta: header.meta,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, to_bytes(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
