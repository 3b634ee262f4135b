//! Manifest-plus-blob archives.
//!
//! An archive at `<path>` is two files: `<path>.json`, a UTF-8 manifest
//! listing every array's name, shape, dtype and byte region, and
//! `<path>.bin`, the headerless little-endian values concatenated in
//! manifest order.

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use mop_core::Matrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {}: {source}", path.display())]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported format_version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("array `{0}` appears more than once")]
    NameCollision(String),
    #[error("array `{name}`: shape {shape:?} holds {expected} values but {found} were given")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("array `{name}`: non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("array `{name}`: {reason}")]
    Region { name: String, reason: String },
    #[error("array `{name}`: {reason}")]
    Content { name: String, reason: String },
    #[error("archive has no array `{0}`")]
    Missing(String),
    #[error("metadata key `{key}`: {reason}")]
    Metadata { key: String, reason: String },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
}

impl DType {
    pub fn size(self) -> usize {
        4
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub blob_offset: u64,
    pub blob_length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub arrays: Vec<ArrayEntry>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::I32(_) => DType::I32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: ArrayData::F32(data),
        }
    }

    pub fn i32(name: impl Into<String>, shape: Vec<usize>, data: Vec<i32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: ArrayData::I32(data),
        }
    }

    pub fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self::f32(name, vec![m.rows(), m.cols()], m.as_slice().to_vec())
    }
}

/// Arrays plus free-form string metadata, in manifest order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| StoreError::Missing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.iter().any(|a| a.name == name)
    }

    pub fn f32s(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F32(v) => Ok((&a.shape, v)),
            ArrayData::I32(_) => Err(content(name, "expected dtype f32, found i32")),
        }
    }

    pub fn i32s(&self, name: &str) -> Result<(&[usize], &[i32])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::I32(v) => Ok((&a.shape, v)),
            ArrayData::F32(_) => Err(content(name, "expected dtype i32, found f32")),
        }
    }

    /// A rank-2 f32 array as a [`Matrix`].
    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let (shape, v) = self.f32s(name)?;
        let [rows, cols] = shape else {
            return Err(content(
                name,
                format!("expected rank 2, found shape {shape:?}"),
            ));
        };
        Matrix::from_vec(*rows, *cols, v.to_vec()).map_err(|e| content(name, e.to_string()))
    }

    /// A rank-1 i32 array of non-negative values as indices.
    pub fn indices(&self, name: &str) -> Result<Vec<usize>> {
        let (shape, v) = self.i32s(name)?;
        if shape.len() != 1 {
            return Err(content(
                name,
                format!("expected rank 1, found shape {shape:?}"),
            ));
        }
        v.iter()
            .map(|&x| usize::try_from(x).map_err(|_| content(name, format!("negative index {x}"))))
            .collect()
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| StoreError::Metadata {
                key: key.to_string(),
                reason: "missing".into(),
            })
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.meta_str(key)?
            .parse()
            .map_err(|e: T::Err| StoreError::Metadata {
                key: key.to_string(),
                reason: e.to_string(),
            })
    }
}

pub(crate) fn content(name: &str, reason: impl Into<String>) -> StoreError {
    StoreError::Content {
        name: name.to_string(),
        reason: reason.into(),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    with_suffix(path, ".json")
}

pub fn blob_path(path: &Path) -> PathBuf {
    with_suffix(path, ".bin")
}

fn element_count(name: &str, shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| StoreError::Region {
            name: name.to_string(),
            reason: format!("shape {shape:?} overflows"),
        })
}

/// Writes `archive` to `<path>.json` and `<path>.bin` and returns the
/// manifest. Identical input gives byte-identical files.
pub fn write_archive(archive: &Archive, path: &Path) -> Result<Manifest> {
    let mut seen = HashSet::new();
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(archive.arrays.len());
    for a in &archive.arrays {
        if !seen.insert(a.name.as_str()) {
            return Err(StoreError::NameCollision(a.name.clone()));
        }
        let expected = element_count(&a.name, &a.shape)?;
        if expected != a.data.len() {
            return Err(StoreError::ShapeMismatch {
                name: a.name.clone(),
                shape: a.shape.clone(),
                expected,
                found: a.data.len(),
            });
        }
        let offset = blob.len() as u64;
        match &a.data {
            ArrayData::F32(v) => {
                if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                    return Err(StoreError::NonFinite {
                        name: a.name.clone(),
                        index,
                    });
                }
                v.iter()
                    .for_each(|x| blob.extend_from_slice(&x.to_le_bytes()));
            }
            ArrayData::I32(v) => v
                .iter()
                .for_each(|x| blob.extend_from_slice(&x.to_le_bytes())),
        }
        entries.push(ArrayEntry {
            name: a.name.clone(),
            shape: a.shape.clone(),
            dtype: a.data.dtype(),
            blob_offset: offset,
            blob_length: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arrays: entries,
        metadata: archive.metadata.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    text.push('\n');
    let (mpath, bpath) = (manifest_path(path), blob_path(path));
    fs::write(&bpath, &blob).map_err(|source| StoreError::Io {
        path: bpath,
        source,
    })?;
    fs::write(&mpath, text).map_err(|source| StoreError::Io {
        path: mpath,
        source,
    })?;
    Ok(manifest)
}

/// Checks every manifest invariant against a blob of `blob_len` bytes.
pub fn validate_manifest(manifest: &Manifest, blob_len: u64) -> Result<()> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(StoreError::Version(manifest.format_version));
    }
    let mut seen = HashSet::new();
    for e in &manifest.arrays {
        if !seen.insert(e.name.as_str()) {
            return Err(StoreError::NameCollision(e.name.clone()));
        }
        let region = |reason: String| StoreError::Region {
            name: e.name.clone(),
            reason,
        };
        let bytes = element_count(&e.name, &e.shape)?
            .checked_mul(e.dtype.size())
            .ok_or_else(|| region("byte size overflows".into()))?;
        if bytes as u64 != e.blob_length {
            return Err(region(format!(
                "shape {:?} needs {bytes} bytes but blob_length is {}",
                e.shape, e.blob_length
            )));
        }
        let end = e
            .blob_offset
            .checked_add(e.blob_length)
            .ok_or_else(|| region("region end overflows".into()))?;
        if end > blob_len {
            return Err(region(format!(
                "region {}..{end} runs past the end of a {blob_len}-byte blob",
                e.blob_offset
            )));
        }
    }
    let mut regions: Vec<&ArrayEntry> = manifest
        .arrays
        .iter()
        .filter(|e| e.blob_length > 0)
        .collect();
    regions.sort_by_key(|e| e.blob_offset);
    for w in regions.windows(2) {
        if w[0].blob_offset + w[0].blob_length > w[1].blob_offset {
            return Err(StoreError::Region {
                name: w[1].name.clone(),
                reason: format!("region overlaps array `{}`", w[0].name),
            });
        }
    }
    Ok(())
}

/// Reads an archive, validating the whole manifest before decoding any
/// array.
pub fn read_archive(path: &Path) -> Result<(Manifest, Archive)> {
    let (mpath, bpath) = (manifest_path(path), blob_path(path));
    let text = fs::read_to_string(&mpath).map_err(|source| StoreError::Io {
        path: mpath.clone(),
        source,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| StoreError::Manifest {
            path: mpath,
            source,
        })?;
    let blob = fs::read(&bpath).map_err(|source| StoreError::Io {
        path: bpath,
        source,
    })?;
    validate_manifest(&manifest, blob.len() as u64)?;

    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for e in &manifest.arrays {
        let bytes = &blob[e.blob_offset as usize..(e.blob_offset + e.blob_length) as usize];
        let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        let data = match e.dtype {
            DType::F32 => {
                let v: Vec<f32> = words.map(f32::from_le_bytes).collect();
                if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                    return Err(StoreError::NonFinite {
                        name: e.name.clone(),
                        index,
                    });
                }
                ArrayData::F32(v)
            }
            DType::I32 => ArrayData::I32(words.map(i32::from_le_bytes).collect()),
        };
        arrays.push(NamedArray {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data,
        });
    }
    let archive = Archive {
        metadata: manifest.metadata.clone(),
        arrays,
    };
    Ok((manifest, archive))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_json_is_stable() {
        let m = Manifest {
            format_version: 1,
            arrays: vec![ArrayEntry {
                name: "x".into(),
                shape: vec![2, 2],
                dtype: DType::I32,
                blob_offset: 0,
                blob_length: 16,
            }],
            metadata: BTreeMap::from([("seed".to_string(), "3".to_string())]),
        };
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(
            s,
            r#"{"format_version":1,"arrays":[{"name":"x","shape":[2,2],"dtype":"i32","blob_offset":0,"blob_length":16}],"metadata":{"seed":"3"}}"#
        );
        assert_eq!(serde_json::from_str::<Manifest>(&s).unwrap(), m);
    }

    #[test]
    fn overlapping_regions_name_the_array() {
        let entry = |name: &str, off| ArrayEntry {
            name: name.into(),
            shape: vec![2],
            dtype: DType::F32,
            blob_offset: off,
            blob_length: 8,
        };
        let m = Manifest {
            format_version: 1,
            arrays: vec![entry("a", 0), entry("b", 4)],
            metadata: BTreeMap::new(),
        };
        let err = validate_manifest(&m, 16).unwrap_err().to_string();
        assert!(err.contains("`b`") && err.contains("`a`"), "{err}");
    }
}
