//! Tensor archives: a JSON manifest plus a raw little-endian `f64` file.
//!
//! ```json
//! {"data_file": "weights.bin",
//!  "tensors": [{"name": "w", "shape": [2, 3], "dtype": "f64", "offset": 0, "length": 48}]}
//! ```
//!
//! `offset` and `length` are in bytes. `data_file` is resolved relative to
//! the manifest and defaults to the manifest path with a `.bin` extension.
//! Small fixtures may drop `offset`/`length` and inline `"data"` as nested
//! arrays matching `shape`.

use std::fs;
use std::path::{Path, PathBuf};

use detlab_core::{Tensor, TensorArchive};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_file: Option<String>,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Raw,
    Inline,
}

const F64_BYTES: u64 = 8;

fn default_data_file(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn bad_entry(path: &Path, field: String, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        column: 0,
        field,
        message,
    }
}

pub fn read_archive(manifest_path: &Path) -> Result<TensorArchive> {
    let manifest: Manifest = json::read_json(manifest_path)?;
    let needs_raw = manifest.tensors.iter().any(|t| t.data.is_none());
    let raw_path = match &manifest.data_file {
        Some(f) => manifest_path.parent().unwrap_or(Path::new(".")).join(f),
        None => default_data_file(manifest_path),
    };
    let raw = if needs_raw {
        fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?
    } else {
        Vec::new()
    };
    let mut archive = TensorArchive::new();
    for (i, e) in manifest.tensors.iter().enumerate() {
        let field = |f: &str| format!("tensors[{i}].{f}");
        if e.dtype != "f64" {
            return Err(bad_entry(manifest_path, field("dtype"), format!("unsupported dtype {:?}", e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        let data = match (&e.data, e.offset, e.length) {
            (Some(v), None, None) => {
                let mut out = Vec::with_capacity(numel);
                flatten(v, &e.shape, &mut out).map_err(|m| bad_entry(manifest_path, field("data"), m))?;
                out
            }
            (None, Some(offset), Some(length)) => {
                if length != numel as u64 * F64_BYTES {
                    return Err(bad_entry(
                        manifest_path,
                        field("length"),
                        format!("{length} bytes do not hold shape {:?}", e.shape),
                    ));
                }
                let end = offset.checked_add(length).filter(|&end| end <= raw.len() as u64).ok_or_else(|| {
                    bad_entry(
                        manifest_path,
                        field("offset"),
                        format!("range {offset}+{length} exceeds {} ({} bytes)", raw_path.display(), raw.len()),
                    )
                })?;
                raw[offset as usize..end as usize]
                    .chunks_exact(F64_BYTES as usize)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect()
            }
            _ => {
                return Err(bad_entry(
                    manifest_path,
                    field("data"),
                    "need either inline data or both offset and length".into(),
                ))
            }
        };
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad_entry(manifest_path, field("shape"), err.to_string()))?;
        if archive.insert(e.name.clone(), t).is_some() {
            return Err(bad_entry(manifest_path, field("name"), format!("duplicate tensor {:?}", e.name)));
        }
    }
    Ok(archive)
}

fn flatten(v: &Value, shape: &[usize], out: &mut Vec<f64>) -> Result<(), String> {
    match shape.split_first() {
        None => {
            out.push(v.as_f64().ok_or_else(|| format!("expected a number, found {v}"))?);
            Ok(())
        }
        Some((&n, rest)) => {
            let items = v.as_array().ok_or_else(|| format!("expected an array of length {n}"))?;
            if items.len() != n {
                return Err(format!("expected {n} elements, found {}", items.len()));
            }
            items.iter().try_for_each(|item| flatten(item, rest, out))
        }
    }
}

fn nest(data: &[f64], shape: &[usize]) -> Result<Value> {
    match shape.split_first() {
        None => serde_json::Number::from_f64(data[0])
            .map(Value::Number)
            .ok_or_else(|| Error::config("inline archives cannot hold non-finite values")),
        Some((&n, rest)) => {
            let step: usize = rest.iter().product();
            (0..n).map(|i| nest(&data[i * step..], rest)).collect::<Result<Vec<_>>>().map(Value::Array)
        }
    }
}

/// Write `archive` in name order. With [`Layout::Raw`] the data goes to the
/// default `.bin` companion of `manifest_path`.
pub fn write_archive(archive: &TensorArchive, manifest_path: &Path, layout: Layout) -> Result<()> {
    let mut tensors = Vec::with_capacity(archive.len());
    let mut raw = Vec::new();
    for (name, t) in archive.iter() {
        let mut entry = ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: None,
            length: None,
            data: None,
        };
        match layout {
            Layout::Raw => {
                entry.offset = Some(raw.len() as u64);
                entry.length = Some(t.len() as u64 * F64_BYTES);
                raw.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
            }
            Layout::Inline => entry.data = Some(nest(t.data(), t.shape())?),
        }
        tensors.push(entry);
    }
    let data_file = match layout {
        Layout::Raw => {
            let p = default_data_file(manifest_path);
            fs::write(&p, &raw).map_err(|e| Error::io(&p, e))?;
            p.file_name().map(|f| f.to_string_lossy().into_owned())
        }
        Layout::Inline => None,
    };
    let manifest = Manifest { data_file, tensors };
    json::write_output(Some(manifest_path), json::to_json(&manifest)?.as_bytes())
}
