//! `manifest.json`: the file table tying a bundle's tensors together.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pct1;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EXTENSION_TEMPLATE: &str = "{class name}, {description}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub shape: Vec<usize>,
    /// CRC32 of the whole file.
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub version: u32,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "N")]
    pub n_classes: usize,
    #[serde(rename = "K")]
    pub shots: usize,
    #[serde(rename = "M")]
    pub props: usize,
    pub seed: u64,
    /// Description texts, relative to the manifest directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptions: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extension_template: Option<String>,
    pub files: BTreeMap<String, FileEntry>,
}

/// A manifest together with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct ManifestDir {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Manifest {
    pub fn new(dim: usize, n_classes: usize, shots: usize, props: usize, seed: u64) -> Self {
        Self {
            format_version: 1,
            version: MANIFEST_VERSION,
            dim,
            n_classes,
            shots,
            props,
            seed,
            descriptions: None,
            extension_template: Some(EXTENSION_TEMPLATE.to_string()),
            files: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

impl ManifestDir {
    /// Parses `manifest.json` at `path` (or inside `path` if it is a directory).
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push(MANIFEST_FILE);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format {
                path,
                msg: format!("unsupported manifest version {}", manifest.version),
            });
        }
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self { root, manifest })
    }

    pub fn create(root: impl Into<PathBuf>, manifest: Manifest) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root, manifest })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.files.contains_key(name)
    }

    /// Writes `t` to `rel` and records it under `name`.
    pub fn put_tensor(&mut self, name: &str, rel: &str, t: &Tensor) -> Result<()> {
        let path = self.resolve(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes = pct1::encode(t)?;
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.files.insert(
            name.to_string(),
            FileEntry {
                path: rel.to_string(),
                shape: t.shape().to_vec(),
                crc32: crc32fast::hash(&bytes),
            },
        );
        Ok(())
    }

    /// Loads the tensor recorded under `name`, checking file checksum and shape.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let entry = self.manifest.files.get(name).ok_or_else(|| Error::Validation {
            invariant: "file-table",
            detail: format!("manifest has no entry {name:?}"),
        })?;
        let path = self.resolve(&entry.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let actual = crc32fast::hash(&bytes);
        if actual != entry.crc32 {
            return Err(Error::Checksum {
                path,
                expected: entry.crc32,
                actual,
            });
        }
        let t = pct1::decode(&bytes, &path)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Validation {
                invariant: "shape",
                detail: format!(
                    "{name}: manifest shape {:?}, file header {:?}",
                    entry.shape,
                    t.shape()
                ),
            });
        }
        Ok(t)
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.manifest.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
