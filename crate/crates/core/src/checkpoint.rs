//! Binary checkpoint format.
//!
//! Layout: magic `DMF1`, format version (u32 LE), then named sections until
//! the trailing CRC32 (u32 LE) of every preceding byte. A section is the
//! name length (u32), the UTF-8 name, the rank (u32), each dimension (u32)
//! and the raw f32 little-endian data.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DMF1";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.total_elements() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.end - self.pos < n {
            return Err(corrupt(self.pos, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn corrupt(offset: usize, message: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        offset,
        message: message.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < 12 {
        return Err(corrupt(0, "file too short"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let end = bytes.len() - 4;
    let stored = u32::from_le_bytes([bytes[end], bytes[end + 1], bytes[end + 2], bytes[end + 3]]);
    if crc32fast::hash(&bytes[..end]) != stored {
        return Err(corrupt(end, "CRC mismatch"));
    }
    let mut r = Reader { bytes, pos: 4, end };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(corrupt(4, format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    while r.pos < end {
        let start = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| corrupt(start + 4, "section name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let bytes_needed = shape
            .iter()
            .try_fold(4usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt(start, format!("section {name} is too large")))?;
        let raw = r.take(bytes_needed, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(&shape, data).map_err(|e| corrupt(start, format!("section {name}: {e}")))?;
        store.insert(name, t);
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(store))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    decode(&std::fs::read(path)?)
}

/// Path of the checkpoint written at `step`.
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step}.dmf"))
}

/// The checkpoint with the highest step in `dir`, if any.
pub fn latest(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt_"))
            .and_then(|n| n.strip_suffix(".dmf"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best)
}

/// Section prefix of optimizer state in a resumable checkpoint.
pub const OPTIM_PREFIX: &str = "optim.";

/// Writes parameters and optimizer state as `ckpt_<step>.dmf` in `dir`.
pub fn save_training(dir: &Path, step: u64, params: &ParamStore, optimizer: &Optimizer) -> Result<PathBuf> {
    let mut store = params.clone();
    store.merge(&optimizer.state_tensors(OPTIM_PREFIX));
    let path = checkpoint_path(dir, step);
    save(&store, &path)?;
    Ok(path)
}

/// Model parameters of a checkpoint, without any optimizer state.
pub fn load_params(path: &Path) -> Result<ParamStore> {
    let store = load(path)?;
    let mut params = ParamStore::new();
    for (name, t) in store.iter() {
        if !name.starts_with(OPTIM_PREFIX) {
            params.insert(name.clone(), t.clone());
        }
    }
    Ok(params)
}

/// Loads a checkpoint written by [`save_training`], restoring the optimizer
/// and returning the parameters without the optimizer sections.
pub fn load_training(path: &Path, optimizer: &mut Optimizer) -> Result<ParamStore> {
    optimizer.load_state(&load(path)?, OPTIM_PREFIX)?;
    load_params(path)
}
