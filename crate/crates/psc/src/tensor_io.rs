//! Tensors on disk: a JSON sidecar `<name>.json` describing the shape and a
//! raw little-endian `f64` payload in `<name>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use psc_core::Tensor;
use serde_json::{json, Value};

/// `<name>.json` and `<name>.bin` for a path given with or without either
/// extension.
pub fn file_pair(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json" | "bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("json"), with("bin"))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let (meta, bin) = file_pair(path);
    let header = json!({ "shape": t.shape(), "dtype": "f64", "order": "row-major" });
    fs::write(&meta, serde_json::to_string_pretty(&header)? + "\n")
        .with_context(|| format!("cannot write {}", meta.display()))?;
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin, bytes).with_context(|| format!("cannot write {}", bin.display()))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let (meta, bin) = file_pair(path);
    let text = fs::read_to_string(&meta).with_context(|| format!("cannot read {}", meta.display()))?;
    let header: Value = serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", meta.display()))?;
    let field = |k: &str| header.get(k).with_context(|| format!("{}: missing field {k:?}", meta.display()));
    if field("dtype")?.as_str() != Some("f64") {
        bail!("{}: field \"dtype\" must be \"f64\"", meta.display());
    }
    if field("order")?.as_str() != Some("row-major") {
        bail!("{}: field \"order\" must be \"row-major\"", meta.display());
    }
    let shape: Vec<usize> = field("shape")?
        .as_array()
        .and_then(|a| a.iter().map(|v| v.as_u64().map(|u| u as usize)).collect())
        .with_context(|| format!("{}: field \"shape\" must be a list of non-negative integers", meta.display()))?;
    let bytes = fs::read(&bin).with_context(|| format!("cannot read {}", bin.display()))?;
    let len: usize = shape.iter().product();
    if bytes.len() != len * 8 {
        bail!("{}: expected {} bytes for shape {:?}, found {}", bin.display(), len * 8, shape, bytes.len());
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Tensor::from_vec(&shape, data).with_context(|| format!("{}: invalid tensor", meta.display()))
}
