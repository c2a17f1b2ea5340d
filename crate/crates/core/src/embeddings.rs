//! EMB1 embedding files and their JSON sidecar.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! 0..4   magic "EMB1"
//! 4      format version (1)
//! 5      has_labels (0 | 1)
//! 6..8   reserved, zero
//! 8..12  u32 row count n
//! 12..16 u32 dimension d
//! ...    n·d f32 values, row-major
//! ...    n i32 labels, present iff has_labels == 1
//! ```
//!
//! Domain name, sample ids and class names live in `<path>.meta.json`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 16;

/// A dense row-major f32 matrix with optional per-row labels, as stored in
/// an EMB1 file.
#[derive(Clone, Debug, PartialEq)]
pub struct Emb1 {
    pub rows: usize,
    pub dim: usize,
    pub vectors: Vec<f32>,
    pub labels: Option<Vec<u32>>,
}

impl Emb1 {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.rows == 0 || self.dim == 0 {
            return Err(Error::Precondition(format!(
                "cannot encode an empty matrix ({}x{})",
                self.rows, self.dim
            )));
        }
        let rows = u32::try_from(self.rows)
            .map_err(|_| Error::Precondition(format!("too many rows: {}", self.rows)))?;
        let dim = u32::try_from(self.dim)
            .map_err(|_| Error::Precondition(format!("dimension too large: {}", self.dim)))?;
        if self.vectors.len() != self.rows * self.dim {
            return Err(Error::shape(self.rows * self.dim, self.vectors.len()));
        }
        let label_bytes = self.labels.as_ref().map_or(0, |l| 4 * l.len());
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.vectors.len() + label_bytes);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(u8::from(self.labels.is_some()));
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&rows.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.rows {
                return Err(Error::shape(self.rows, labels.len()));
            }
            for &label in labels {
                let label = i32::try_from(label).map_err(|_| {
                    Error::Precondition(format!("label {label} does not fit in i32"))
                })?;
                out.extend_from_slice(&label.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and validates an EMB1 byte buffer. `path` is used for error
    /// messages only.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < HEADER_LEN {
            return Err(format(format!(
                "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(format(format!("bad magic {:?}", &bytes[0..4])));
        }
        if bytes[4] != VERSION {
            return Err(format(format!("unsupported version {}", bytes[4])));
        }
        let has_labels = match bytes[5] {
            0 => false,
            1 => true,
            other => return Err(format(format!("has_labels flag must be 0 or 1, got {other}"))),
        };
        if bytes[6..8] != [0, 0] {
            return Err(format("reserved header bytes are not zero".into()));
        }
        let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        if rows == 0 || dim == 0 {
            return Err(format(format!("degenerate shape {rows}x{dim}")));
        }

        // Sizes are checked in u64 against the actual payload before any
        // allocation proportional to the header happens.
        let values = u64::from(rows) * u64::from(dim);
        let expected = values
            .saturating_mul(4)
            .saturating_add(if has_labels { 4 * u64::from(rows) } else { 0 });
        let found = (bytes.len() - HEADER_LEN) as u64;
        if found < expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected,
                found,
            });
        }
        if found > expected {
            return Err(format(format!(
                "{} trailing bytes after declared payload",
                found - expected
            )));
        }

        let (rows, dim) = (rows as usize, dim as usize);
        let payload = &bytes[HEADER_LEN..];
        let (vector_bytes, label_bytes) = payload.split_at(4 * rows * dim);
        let vectors: Vec<f32> = vector_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "{}: non-finite value in row {}",
                path.display(),
                pos / dim
            )));
        }
        let labels = if has_labels {
            let mut labels = Vec::with_capacity(rows);
            for (row, c) in label_bytes.chunks_exact(4).enumerate() {
                let label = i32::from_le_bytes(c.try_into().unwrap());
                let label = u32::try_from(label).map_err(|_| {
                    Error::Validation(format!(
                        "{}: negative label {label} in row {row}",
                        path.display()
                    ))
                })?;
                labels.push(label);
            }
            Some(labels)
        } else {
            None
        };
        Ok(Self {
            rows,
            dim,
            vectors,
            labels,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

/// Path of the JSON sidecar belonging to an EMB1 file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    domain_name: String,
    sample_ids: Vec<String>,
    class_names: Option<Vec<String>>,
}

/// One domain's embedded samples.
///
/// Immutable after construction; all invariants are checked by
/// [`EmbeddingSet::new`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    domain_name: String,
    dim: usize,
    vectors: Vec<f32>,
    labels: Option<Vec<u32>>,
    sample_ids: Vec<String>,
    class_names: Option<Vec<String>>,
}

impl EmbeddingSet {
    pub fn new(
        domain_name: impl Into<String>,
        dim: usize,
        vectors: Vec<f32>,
        labels: Option<Vec<u32>>,
        sample_ids: Vec<String>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Precondition("embedding dimension must be positive".into()));
        }
        if vectors.is_empty() {
            return Err(Error::Precondition("embedding set has no samples".into()));
        }
        if vectors.len() % dim != 0 {
            return Err(Error::Validation(format!(
                "{} values do not form rows of dimension {dim}",
                vectors.len()
            )));
        }
        let n = vectors.len() / dim;
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value in row {}", pos / dim)));
        }
        if sample_ids.len() != n {
            return Err(Error::shape(n, sample_ids.len()));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Validation(format!("duplicate sample id {dup:?}")));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::shape(n, labels.len()));
            }
            if let Some(row) = labels.iter().position(|&l| l > i32::MAX as u32) {
                return Err(Error::Validation(format!("label out of i32 range in row {row}")));
            }
            if let Some(names) = &class_names {
                if let Some(row) = labels.iter().position(|&l| l as usize >= names.len()) {
                    return Err(Error::Validation(format!(
                        "label {} in row {row} has no class name ({} classes)",
                        labels[row],
                        names.len()
                    )));
                }
            }
        }
        Ok(Self {
            domain_name: domain_name.into(),
            dim,
            vectors,
            labels,
            sample_ids,
            class_names,
        })
    }

    pub fn domain_name(&self) -> &str {
        &self.domain_name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Number of classes: the class name count when known, otherwise one
    /// past the largest label.
    pub fn num_classes(&self) -> Option<usize> {
        match (&self.class_names, &self.labels) {
            (Some(names), _) => Some(names.len()),
            (None, Some(labels)) => labels.iter().max().map(|&m| m as usize + 1),
            (None, None) => None,
        }
    }

    pub fn to_emb1(&self) -> Emb1 {
        Emb1 {
            rows: self.len(),
            dim: self.dim,
            vectors: self.vectors.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Reads an EMB1 file and its sidecar.
///
/// A missing sidecar is tolerated: the domain is named after the file stem
/// and samples are identified by their row index.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let raw = Emb1::read(path)?;
    let meta_path = sidecar_path(path);
    let meta = if meta_path.exists() {
        read_json::<Sidecar>(&meta_path)?
    } else {
        log::warn!("{} has no sidecar; using row indices as sample ids", path.display());
        Sidecar {
            domain_name: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sample_ids: (0..raw.rows).map(|i| i.to_string()).collect(),
            class_names: None,
        }
    };
    EmbeddingSet::new(
        meta.domain_name,
        raw.dim,
        raw.vectors,
        raw.labels,
        meta.sample_ids,
        meta.class_names,
    )
}

/// Writes `set` as EMB1 plus its `<path>.meta.json` sidecar.
pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    set.to_emb1().write(path)?;
    write_json(
        &sidecar_path(path),
        &Sidecar {
            domain_name: set.domain_name.clone(),
            sample_ids: set.sample_ids.clone(),
            class_names: set.class_names.clone(),
        },
    )
}
