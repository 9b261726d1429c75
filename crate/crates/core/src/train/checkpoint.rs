//! Binary checkpoint: `GDNT`, u32 version, u32 config length + config JSON,
//! u32 record count, then per record: u32 name length, UTF-8 name, u32 rank,
//! u64 dims, f32 little-endian payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GDNT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Names actually restored by a load, in file order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub restored: Vec<String>,
    pub skipped: Vec<String>,
}

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>, config_json: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + config_json.len() + 4 * store.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                what: "checkpoint".into(),
                offset: self.pos as u64,
                detail: format!("truncated while reading {what} ({n} bytes needed)"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn err(&self, offset: usize, detail: String) -> Error {
        Error::Parse {
            what: "checkpoint".into(),
            offset: offset as u64,
            detail,
        }
    }
}

/// Header-only read: the config JSON echo.
pub fn checkpoint_config(bytes: &[u8]) -> Result<String> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::FormatMismatch {
            expected: "GDNT checkpoint".into(),
            found: format!("{:?}", String::from_utf8_lossy(magic)),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let cfg = r.take(len, "config")?;
    String::from_utf8(cfg.to_vec()).map_err(|e| r.err(at, format!("config is not UTF-8: {e}")))
}

/// Restore parameters whose name starts with `prefix` (all when `None`).
/// Unknown names and shape conflicts are errors; on error the store is
/// left unchanged.
pub fn decode_checkpoint<T: Scalar>(
    bytes: &[u8],
    store: &mut ParamStore<T>,
    prefix: Option<&str>,
) -> Result<LoadReport> {
    let cfg_len = checkpoint_config(bytes)?.len();
    let mut r = Reader {
        bytes,
        pos: 12 + cfg_len,
    };
    let count = r.u32("record count")? as usize;
    let mut pending = Vec::new();
    let mut report = LoadReport::default();
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|e| r.err(at, format!("parameter name is not UTF-8: {e}")))?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(r.err(at, format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4, "payload")?;
        if !seen.insert(name.clone()) {
            return Err(r.err(at, format!("duplicate parameter {name}")));
        }
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name} at offset {at}")))?;
        let expected = store.get(id).value.shape();
        if expected != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape conflict for {name}: file {shape:?}, model {expected:?}"
            )));
        }
        if prefix.is_some_and(|p| !name.starts_with(p)) {
            report.skipped.push(name);
            continue;
        }
        let values: Vec<T> = payload
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        pending.push((id, values));
        report.restored.push(name);
    }
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if prefix.is_none() && seen.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} of {} model parameters",
            seen.len(),
            store.len()
        )));
    }
    for (id, values) in pending {
        store.set_value(id, values)?;
    }
    Ok(report)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, store: &ParamStore<T>, config_json: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_checkpoint(store, config_json)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    store: &mut ParamStore<T>,
    prefix: Option<&str>,
) -> Result<LoadReport> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, store, prefix)
}

pub fn read_checkpoint_config(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_config(&bytes)
}
