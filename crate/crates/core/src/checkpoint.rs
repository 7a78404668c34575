//! Versioned binary container: an ASCII version line, a little-endian `u64`
//! manifest length, a JSON manifest (tensor names, shapes, dtype and free
//! metadata) and the raw little-endian `f64` data in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CKPT_VERSION: &str = "savekit-ckpt-v1";
pub const WORDS_VERSION: &str = "savekit-words-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub version: String,
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn new(version: &str, tensors: BTreeMap<String, Tensor>, meta: serde_json::Value) -> Self {
        Self {
            version: version.to_string(),
            tensors,
            meta,
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            version: self.version.clone(),
            entries: self
                .tensors
                .iter()
                .map(|(name, t)| ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(self.version.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], expected_version: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing version line"))?;
        let version = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("version line is not ASCII"))?;
        if version != expected_version {
            return Err(Error::Checkpoint(format!(
                "version `{version}`, expected `{expected_version}`"
            )));
        }
        let mut pos = nl + 1;
        let len_bytes = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| bad("truncated manifest length"))?;
        let len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        pos += 8;
        let json = bytes
            .get(pos..pos + len)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        pos += len;
        let mut tensors = BTreeMap::new();
        for e in manifest.entries {
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            let numel: usize = e.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 8 * numel)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` truncated", e.name)))?;
            pos += 8 * numel;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name, Tensor::new(&e.shape, data)?);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Self {
            version: version.to_string(),
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path, expected_version: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_version)
    }
}

/// Write to a sibling temp file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
