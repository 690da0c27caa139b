//! Dataset manifest, the RGC1 columnar row-group format and the synthetic
//! data generator.
//!
//! Every value in a generated dataset is a closed-form function of its
//! `(group, row, column)` coordinates, see [`synthetic_value`], so any batch
//! the pipeline delivers can be checked without reference data.
//!
//! RGC1 layout (all integers little-endian):
//!
//! ```text
//! "RGC1" | u32 version = 1 | u32 num_rows | u32 num_cols | col 0 block | ... | col C-1 block
//! ```
//!
//! where each column block is `num_rows` consecutive `f32` values.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::Fnv1a;

pub const MAGIC: &[u8; 4] = b"RGC1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("failed to write dataset file {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("failed to read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("malformed manifest {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("invalid dataset parameters: {0}")]
    Params(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub num_cols: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowGroupMeta {
    pub group_id: u64,
    pub num_rows: u32,
    pub byte_size: u64,
}

/// Ordered catalog of the row groups of one dataset.
///
/// Serialized field order is fixed (`schema`, `dataset_uri`, `groups`) so
/// the manifest file is byte-stable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: Schema,
    pub dataset_uri: String,
    pub groups: Vec<RowGroupMeta>,
}

/// Encoded row-group bytes as fetched from the store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRowGroup(Vec<u8>);

impl RawRowGroup {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Value stored at `(group, row, col)` in every generated dataset.
#[inline]
pub fn synthetic_value(group: u64, row: u64, col: u64) -> f32 {
    // Wrapping arithmetic is exact modulo 2^16 because 2^16 divides 2^64.
    let key = group
        .wrapping_mul(1_000_003)
        .wrapping_add(row.wrapping_mul(10_007))
        .wrapping_add(col.wrapping_mul(101));
    (key % 65_536) as f32 / 256.0
}

pub fn encoded_len(num_rows: u32, num_cols: u32) -> u64 {
    HEADER_LEN as u64 + 4 * num_rows as u64 * num_cols as u64
}

pub fn encode_row_group(group: u64, num_rows: u32, schema: Schema) -> RawRowGroup {
    let mut buf = Vec::with_capacity(encoded_len(num_rows, schema.num_cols) as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&num_rows.to_le_bytes());
    buf.extend_from_slice(&schema.num_cols.to_le_bytes());
    for c in 0..schema.num_cols as u64 {
        for r in 0..num_rows as u64 {
            buf.extend_from_slice(&synthetic_value(group, r, c).to_le_bytes());
        }
    }
    RawRowGroup(buf)
}

pub fn row_group_file_name(group_id: u64) -> String {
    format!("rg-{group_id}.bin")
}

impl Manifest {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, group_id: u64) -> Option<&RowGroupMeta> {
        self.groups.get(usize::try_from(group_id).ok()?)
    }

    pub fn dataset_dir(&self) -> &Path {
        Path::new(&self.dataset_uri)
    }

    pub fn total_rows(&self) -> u64 {
        self.groups.iter().map(|g| g.num_rows as u64).sum()
    }

    /// Bytes of one decoded `f32` tensor per group, summed over the dataset.
    pub fn total_tensor_bytes(&self) -> u64 {
        self.total_rows() * self.schema.num_cols as u64 * 4
    }

    /// Location-independent identity of the dataset content.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_u64(self.schema.num_cols as u64);
        for g in &self.groups {
            h.write_u64(g.group_id);
            h.write_u64(g.num_rows as u64);
            h.write_u64(g.byte_size);
        }
        h.finish()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.schema.num_cols == 0 {
            return Err(DatasetError::Invalid("schema.num_cols must be >= 1".into()));
        }
        if self.groups.is_empty() {
            return Err(DatasetError::Invalid("groups must not be empty".into()));
        }
        for (idx, g) in self.groups.iter().enumerate() {
            if g.group_id != idx as u64 {
                return Err(DatasetError::Invalid(format!(
                    "groups[{idx}].group_id is {} but must be {idx}",
                    g.group_id
                )));
            }
            if g.num_rows == 0 {
                return Err(DatasetError::Invalid(format!(
                    "groups[{idx}].num_rows must be >= 1"
                )));
            }
            let expected = encoded_len(g.num_rows, self.schema.num_cols);
            if g.byte_size != expected {
                return Err(DatasetError::Invalid(format!(
                    "groups[{idx}].byte_size is {} but must be {expected}",
                    g.byte_size
                )));
            }
        }
        Ok(())
    }
}

/// Writes `num_groups` row-group files plus `manifest.json` into `out_dir`.
pub fn generate_dataset(
    num_groups: u64,
    rows_per_group: u32,
    num_cols: u32,
    out_dir: &Path,
) -> Result<Manifest, DatasetError> {
    if num_groups == 0 || rows_per_group == 0 || num_cols == 0 {
        return Err(DatasetError::Params(format!(
            "groups={num_groups} rows={rows_per_group} cols={num_cols}; all must be >= 1"
        )));
    }
    fs::create_dir_all(out_dir).map_err(|source| DatasetError::Write {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let schema = Schema { num_cols };
    let mut groups = Vec::with_capacity(num_groups as usize);
    for g in 0..num_groups {
        let raw = encode_row_group(g, rows_per_group, schema);
        let path = out_dir.join(row_group_file_name(g));
        fs::write(&path, raw.as_bytes()).map_err(|source| DatasetError::Write { path, source })?;
        groups.push(RowGroupMeta {
            group_id: g,
            num_rows: rows_per_group,
            byte_size: raw.len() as u64,
        });
    }
    let manifest = Manifest {
        schema,
        dataset_uri: out_dir.to_string_lossy().into_owned(),
        groups,
    };
    save_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<(), DatasetError> {
    let mut text =
        serde_json::to_string_pretty(manifest).map_err(|source| DatasetError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| DatasetError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| DatasetError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    manifest.validate()?;
    Ok(manifest)
}
