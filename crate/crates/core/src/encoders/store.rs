//! Versioned binary model checkpoints: magic "P3TW", format version, one
//! `(name, shape, raw little-endian doubles)` record per parameter, then the
//! weights hash. A reserved leading `__meta` record (config text encoded as
//! byte values) makes the file self-describing; it is excluded from the
//! weights hash.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{meta_string, parse_meta_string, DualEncoder, FrozenModel};
use crate::error::{Error, Result};
use crate::wire::{atomic_write, Reader, Writer};

const MAGIC: &[u8; 4] = b"P3TW";
const VERSION: u32 = 1;
const META_RECORD: &str = "__meta";

pub fn save_model(path: &Path, model: &FrozenModel) -> Result<()> {
    let mut w = Writer::new();
    w.magic(MAGIC);
    w.u32(VERSION);
    let params = model.params();
    w.u32(params.len() as u32 + 1);

    let meta = meta_string(model.cfg());
    let meta_f64: Vec<f64> = meta.bytes().map(|b| b as f64).collect();
    w.record(META_RECORD, &[meta_f64.len()], &meta_f64);

    let mut hasher = Sha256::new();
    for p in &params {
        let value = p.value();
        w.record(p.name(), p.shape(), &value);
        hasher.update(p.name().as_bytes());
        for &d in p.shape() {
            hasher.update((d as u32).to_le_bytes());
        }
        for v in &value {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest: [u8; 32] = hasher.finalize().into();
    w.bytes(&digest);
    atomic_write(path, &w.buf)
}

pub fn load_model(path: &Path) -> Result<FrozenModel> {
    let bytes = std::fs::read(path)?;
    let pstr = path.display().to_string();
    let mut r = Reader::new(&bytes, &pstr);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(pstr, format!("unsupported model version {version}")));
    }
    let count = r.u32()? as usize;

    let (name, _, meta_f64) = r.record()?;
    if name != META_RECORD {
        return Err(Error::format(pstr, "first record must be __meta"));
    }
    let meta_bytes: Vec<u8> = meta_f64.iter().map(|&v| v as u8).collect();
    let meta = String::from_utf8(meta_bytes).map_err(|_| Error::format(pstr.clone(), "bad meta encoding"))?;
    let cfg = parse_meta_string(&meta, &pstr)?;

    let mut records = Vec::with_capacity(count - 1);
    let mut hasher = Sha256::new();
    for _ in 1..count {
        let (name, shape, data) = r.record()?;
        hasher.update(name.as_bytes());
        for &d in &shape {
            hasher.update((d as u32).to_le_bytes());
        }
        for v in &data {
            hasher.update(v.to_le_bytes());
        }
        records.push((name, shape, data));
    }
    let computed: [u8; 32] = hasher.finalize().into();
    let stored = r.bytes(32)?;
    if computed.as_slice() != stored.as_slice() {
        return Err(Error::format(pstr, "weights hash mismatch; file corrupt"));
    }
    if !r.done() {
        return Err(Error::format(pstr, "trailing bytes"));
    }

    let enc = DualEncoder::build(cfg, 0, false).map_err(|e| match e {
        Error::Argument(m) => Error::format(pstr.clone(), m),
        other => other,
    })?;
    let mut seen = 0;
    for p in enc.params() {
        let rec = records
            .iter()
            .find(|(n, _, _)| n == p.name())
            .ok_or_else(|| Error::format(pstr.clone(), format!("missing parameter {}", p.name())))?;
        if rec.1 != p.shape() {
            return Err(Error::format(
                pstr.clone(),
                format!("parameter {} has shape {:?}, expected {:?}", p.name(), rec.1, p.shape()),
            ));
        }
        p.set_value(rec.2.clone());
        seen += 1;
    }
    if seen != records.len() {
        return Err(Error::format(pstr, "extra parameter records"));
    }
    Ok(FrozenModel::freeze(enc))
}
