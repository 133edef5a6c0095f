// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "MAMBALRP"
//! version      u32
//! config_len   u32, followed by the canonical config text (UTF-8)
//! tensor_count u32
//! per tensor:  name_len u32, name bytes, rank u32, rank × dim u32,
//!              product(dims) × f32 payload
//! ```
//!
//! All integers and floats are little-endian. Tensors are stored in the
//! canonical parameter order but are matched by name on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::classifier::MambaModel;
use crate::model::config::ModelConfig;
use crate::model::params::{layout, MambaParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MAMBALRP";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes `model` to checkpoint bytes.
pub fn encode(model: &MambaModel) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let text = cfg.to_text();
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    let specs = layout(cfg);
    let slots = model.params().flatten();
    put_u32(&mut out, specs.len() as u32);
    for (spec, t) in specs.iter().zip(slots) {
        put_u32(&mut out, spec.name.len() as u32);
        out.extend_from_slice(spec.name.as_bytes());
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Parses checkpoint bytes; no partial model is ever returned.
pub fn decode(bytes: &[u8]) -> Result<MambaModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|_| Error::Format("config text is not UTF-8".into()))?;
    let cfg = ModelConfig::from_text(text).map_err(|e| Error::Format(format!("bad config: {e}")))?;

    let count = r.u32("tensor count")? as usize;
    if count == 0 {
        return Err(Error::Format("empty tensor table".into()));
    }
    let mut table = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let bytes_needed = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let payload = r.take(bytes_needed, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = Tensor::checked(shape, data)?;
        if table.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("tensor `{name}` appears twice")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor table",
            bytes.len() - r.pos
        )));
    }

    let specs = layout(&cfg);
    let mut ordered = Vec::with_capacity(specs.len());
    for spec in &specs {
        let t = table
            .remove(&spec.name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{}`", spec.name)))?;
        if t.shape() != spec.shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor `{}` has shape {:?}, config requires {:?}",
                spec.name,
                t.shape(),
                spec.shape
            )));
        }
        ordered.push(t);
    }
    if let Some(extra) = table.keys().next() {
        return Err(Error::Format(format!("unknown tensor `{extra}`")));
    }
    let params = MambaParams::from_flat(&cfg, ordered)?;
    MambaModel::from_params(cfg, params)
}

pub fn save_checkpoint(model: &MambaModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MambaModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MambaModel {
        let mut cfg = ModelConfig::small(12, 3);
        cfg.num_blocks = 2;
        MambaModel::new(cfg, 17).unwrap()
    }

    #[test]
    fn round_trip_preserves_config_and_values() {
        let m = model();
        let back = decode(&encode(&m)).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in m.params().flatten().into_iter().zip(back.params().flatten()) {
            assert!(a.max_abs_diff(b) <= 1e-6);
        }
        // Already f32-representable values survive exactly.
        assert_eq!(encode(&back), encode(&decode(&encode(&back)).unwrap()));
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode(&model());
        for cut in [0, 4, 8, 12, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let bytes = encode(&model());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        let err = decode(&bad).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(decode(&trailing), Err(Error::Format(_))));
    }

    #[test]
    fn empty_table_is_rejected() {
        let m = model();
        let text = m.config().to_text();
        let mut bytes = MAGIC.to_vec();
        put_u32(&mut bytes, FORMAT_VERSION);
        put_u32(&mut bytes, text.len() as u32);
        bytes.extend_from_slice(text.as_bytes());
        put_u32(&mut bytes, 0);
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("empty tensor table"), "{err}");
    }

    #[test]
    fn mismatched_shape_is_rejected() {
        let m = model();
        let mut cfg = m.config().clone();
        cfg.d_state += 1;
        // Re-label the bytes with a config the tensors do not fit.
        let bytes = encode(&m);
        let old = m.config().to_text();
        let new = cfg.to_text();
        let mut patched = bytes[..12].to_vec();
        put_u32(&mut patched, new.len() as u32);
        patched.extend_from_slice(new.as_bytes());
        patched.extend_from_slice(&bytes[16 + old.len()..]);
        let err = decode(&patched).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), m.config());
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
