//! Directory archive of named little-endian float32 arrays.
//!
//! ```text
//! <dir>/index.json     {"format", "metadata", "arrays": {name: {"shape", "group", "file"}}}
//! <dir>/<file>.f32     raw little-endian float32 values, row-major
//! ```
//!
//! Used for encoder parameters (groups `block`, `head`, `source_head`,
//! `adapter`) and for extracted feature sets (group `features`).

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const INDEX_FILE: &str = "index.json";
pub const FORMAT: &str = "sherrylab-archive-v1";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive missing: {0}")]
    Missing(String),
    #[error("archive corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveArray {
    pub shape: Vec<usize>,
    pub group: String,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub metadata: Value,
    pub arrays: BTreeMap<String, ArchiveArray>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    #[serde(default)]
    metadata: Value,
    arrays: BTreeMap<String, IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    shape: Vec<usize>,
    group: String,
    file: String,
}

fn file_name_for(name: &str) -> String {
    format!("{}.f32", name.replace('/', "__"))
}

impl Archive {
    pub fn insert(&mut self, name: impl Into<String>, group: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.arrays.insert(name.into(), ArchiveArray { shape, group: group.into(), data });
    }

    pub fn save(&self, dir: &Path) -> Result<(), ArchiveError> {
        fs::create_dir_all(dir)?;
        let mut index = IndexFile { format: FORMAT.into(), metadata: self.metadata.clone(), arrays: BTreeMap::new() };
        for (name, arr) in &self.arrays {
            let expected: usize = arr.shape.iter().product();
            if expected != arr.data.len() {
                return Err(ArchiveError::Corrupt(format!("{name}: shape {:?} vs {} values", arr.shape, arr.data.len())));
            }
            let file = file_name_for(name);
            let mut bytes = Vec::with_capacity(arr.data.len() * 4);
            for v in &arr.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(dir.join(&file), bytes)?;
            index.arrays.insert(name.clone(), IndexEntry { shape: arr.shape.clone(), group: arr.group.clone(), file });
        }
        let text = serde_json::to_string_pretty(&index).map_err(io::Error::other)?;
        fs::write(dir.join(INDEX_FILE), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Archive, ArchiveError> {
        let index_path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index_path).map_err(|_| ArchiveError::Missing(index_path.display().to_string()))?;
        let index: IndexFile = serde_json::from_str(&text).map_err(|e| ArchiveError::Corrupt(e.to_string()))?;
        if index.format != FORMAT {
            return Err(ArchiveError::Corrupt(format!("unknown archive format '{}'", index.format)));
        }
        let mut arrays = BTreeMap::new();
        for (name, entry) in index.arrays {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|_| ArchiveError::Missing(path.display().to_string()))?;
            let expected: usize = entry.shape.iter().product();
            if bytes.len() != expected * 4 {
                return Err(ArchiveError::Corrupt(format!(
                    "{name}: expected {} bytes, found {}",
                    expected * 4,
                    bytes.len()
                )));
            }
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            arrays.insert(name, ArchiveArray { shape: entry.shape, group: entry.group, data });
        }
        Ok(Archive { metadata: index.metadata, arrays })
    }

    /// SHA-256 over the index and every array file, in name order.
    pub fn content_hash(dir: &Path) -> Result<String, ArchiveError> {
        let index_path = dir.join(INDEX_FILE);
        let text = fs::read(&index_path).map_err(|_| ArchiveError::Missing(index_path.display().to_string()))?;
        let index: IndexFile = serde_json::from_slice(&text).map_err(|e| ArchiveError::Corrupt(e.to_string()))?;
        let mut hasher = Sha256::new();
        hasher.update(&text);
        for entry in index.arrays.values() {
            hasher.update(fs::read(dir.join(&entry.file))?);
        }
        Ok(hex::encode(hasher.finalize()))
    }
}
