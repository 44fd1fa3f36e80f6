//! Single-file parameter checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, UTF-8 JSON
//! header, then every parameter's values as little-endian `f64` in header
//! order. All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PolicyConfig;
use crate::episode::SeriesStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ParamSet, Policy};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BIACTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: PolicyConfig,
    normalization_stats: SeriesStats,
    use_force: bool,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub(crate) fn to_bytes(policy: &Policy) -> Result<Vec<u8>> {
    let header = Header {
        config: policy.config.clone(),
        normalization_stats: policy.stats.clone(),
        use_force: policy.use_force,
        params: policy
            .params
            .names()
            .iter()
            .zip(policy.params.tensors())
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * policy.params.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in policy.params.tensors() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn from_bytes(bytes: &[u8], path: &Path) -> Result<Policy> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if hlen > body.len() {
        return Err(bad(format!("header length {hlen} exceeds file size")));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    header.config.validate()?;
    let payload = &body[hlen..];
    let want: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if payload.len() != 8 * want {
        return Err(bad(format!(
            "expected {} payload bytes for {want} values, found {}",
            8 * want,
            payload.len()
        )));
    }
    let mut offset = 0;
    let mut pairs = Vec::with_capacity(header.params.len());
    for p in header.params {
        let n: usize = p.shape.iter().product();
        let data = payload[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * n;
        pairs.push((p.name, Tensor::new(p.shape, data)?));
    }
    let params = ParamSet::from_pairs(pairs);
    Policy::check_layout(&header.config, &params)?;
    let s = header.config.action_dim();
    header.normalization_stats.follower.validate(s)?;
    header.normalization_stats.leader.validate(s)?;
    Ok(Policy {
        config: header.config,
        stats: header.normalization_stats,
        use_force: header.use_force,
        params,
    })
}

/// Writes `policy` to `path`, replacing any existing file atomically.
pub fn save_checkpoint(policy: &Policy, path: &Path) -> Result<()> {
    let bytes = to_bytes(policy)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Policy> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
