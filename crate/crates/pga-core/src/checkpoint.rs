//! Checkpoint persistence: a versioned binary weights container plus a JSON
//! sidecar describing how the weights were produced.
//!
//! Container layout ("PGA1"):
//! - magic bytes `PGA1`
//! - entry count, u32 little-endian
//! - per entry: name length (u16 LE), UTF-8 name, dtype code (u8, 2 = f64),
//!   rank (u8), then rank extents (u32 LE each)
//! - raw little-endian f64 buffers for every entry, in manifest order
//!
//! The sidecar (same stem, `.json`) records the grid, model and train
//! configs, content hashes, the patch index, and the validation MAE curve,
//! so a checkpoint can be verified against the run that requests it.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::model::ResNet3DConfig;
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 4] = b"PGA1";
const DTYPE_F64: u8 = 2;

pub type WeightEntry = (String, Vec<usize>, Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub data_hash: String,
    pub train_hash: String,
    /// Patch index within the grid; `None` for the whole-volume baseline.
    pub patch_index: Option<usize>,
    pub grid: GridSpec,
    pub model: ResNet3DConfig,
    pub train: TrainConfig,
    pub epochs_run: usize,
    pub final_val_mae: f64,
    pub val_mae_curve: Vec<f64>,
}

pub fn weights_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.pga"))
}

pub fn sidecar_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

pub fn write_weights(path: &Path, entries: &[WeightEntry]) -> Result<()> {
    let total: usize = entries.iter().map(|(_, _, d)| d.len()).sum();
    let mut buf = Vec::with_capacity(64 * entries.len() + 8 * total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&u32::try_from(entries.len()).unwrap().to_le_bytes());
    for (name, shape, data) in entries {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::config(format!(
                "weights entry {name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::config(format!("weights entry name too long: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(DTYPE_F64);
        buf.push(shape.len() as u8);
        for &extent in shape {
            buf.extend_from_slice(&u32::try_from(extent).unwrap().to_le_bytes());
        }
    }
    for (_, _, data) in entries {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<Vec<WeightEntry>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::invalid(path, reason);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::invalid(
                path,
                format!("truncated: wanted {n} bytes at offset {pos}, file has {}", bytes.len()),
            ));
        }
        let slice = &bytes[pos..pos + n];
        pos += n;
        Ok(slice)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic, not a PGA1 weights file".into()));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| Error::invalid(path, "entry name is not UTF-8"))?
            .to_string();
        let dtype = take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(bad(format!("entry {name}: unsupported dtype code {dtype}")));
        }
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        headers.push((name, shape));
    }
    let mut entries = Vec::with_capacity(count);
    for (name, shape) in headers {
        let numel: usize = shape.iter().product();
        let raw = take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, shape, data));
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes after payload", bytes.len() - pos)));
    }
    Ok(entries)
}

/// Writes `<stem>.pga` and `<stem>.json` under `dir`.
pub fn save(dir: &Path, stem: &str, entries: &[WeightEntry], meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_weights(&weights_path(dir, stem), entries)?;
    let path = sidecar_path(dir, stem);
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::config(format!("serializing checkpoint sidecar: {e}")))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load(dir: &Path, stem: &str) -> Result<(CheckpointMeta, Vec<WeightEntry>)> {
    let path = sidecar_path(dir, stem);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(&path, format!("sidecar is not valid JSON: {e}")))?;
    let entries = read_weights(&weights_path(dir, stem))?;
    Ok((meta, entries))
}

pub fn exists(dir: &Path, stem: &str) -> bool {
    weights_path(dir, stem).is_file() && sidecar_path(dir, stem).is_file()
}
