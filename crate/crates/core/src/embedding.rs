//! EMB1 embedding files and cosine-similarity kernels.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size          | field                              |
//! |--------|---------------|------------------------------------|
//! | 0      | 4             | magic `45 4D 42 31` ("EMB1")       |
//! | 4      | 4             | `u32` version, always 1            |
//! | 8      | 4             | `u32` rows                         |
//! | 12     | 4             | `u32` dim                          |
//! | 16     | 1             | `u8` kind: 0 global, 1 patch       |
//! | 17     | 3             | zero padding                       |
//! | 20     | rows·dim·4    | `f32` values, row-major            |
//! | ...    | 2             | `u16` source tag length            |
//! | ...    | tag length    | UTF-8 source tag                   |
//!
//! Rows are unit-norm. Writers normalize; readers verify each row norm is
//! within [`NORM_TOLERANCE`] of 1, so cosine similarity is a dot product.
//! Patch files list grid cells in row-major order, top-left first.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"EMB1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EmbeddingError {
    #[error("not an embedding file")]
    NotEmbeddingFile,
    #[error("unsupported EMB1 version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown embedding kind byte {0}")]
    UnknownKind(u8),
    #[error("nonzero header padding")]
    BadPadding,
    #[error("short read, expected {expected} bytes, found {actual}")]
    ShortRead { expected: usize, actual: usize },
    #[error("{0} trailing bytes after source tag")]
    TrailingBytes(usize),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("unnormalized row {row} (norm {norm})")]
    Unnormalized { row: usize, norm: f64 },
    #[error("zero vector at row {0} cannot be normalized")]
    ZeroRow(usize),
    #[error("source tag is not valid UTF-8")]
    BadTag,
    #[error("source tag longer than 65535 bytes")]
    TagTooLong,
    #[error("row {row} has {actual} values, expected {expected}")]
    RaggedRow { row: usize, expected: usize, actual: usize },
    #[error("data length {len} is not rows × dim")]
    BadShape { len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmbeddingKind {
    /// One whole-image vector per row.
    Global,
    /// One vector per grid cell.
    Patch,
}

impl std::fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmbeddingKind::Global => "global",
            EmbeddingKind::Patch => "patch",
        })
    }
}

impl EmbeddingKind {
    fn to_byte(self) -> u8 {
        match self {
            EmbeddingKind::Global => 0,
            EmbeddingKind::Patch => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self, EmbeddingError> {
        match b {
            0 => Ok(EmbeddingKind::Global),
            1 => Ok(EmbeddingKind::Patch),
            other => Err(EmbeddingError::UnknownKind(other)),
        }
    }
}

/// Row-major matrix of unit-norm `f32` vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    kind: EmbeddingKind,
    source_tag: String,
}

impl EmbeddingMatrix {
    /// Wraps already-normalized data, verifying finiteness and row norms.
    pub fn new(
        kind: EmbeddingKind,
        dim: usize,
        data: Vec<f32>,
        source_tag: impl Into<String>,
    ) -> Result<Self, EmbeddingError> {
        let rows = if dim == 0 {
            if !data.is_empty() {
                return Err(EmbeddingError::BadShape { len: data.len() });
            }
            0
        } else {
            if !data.len().is_multiple_of(dim) {
                return Err(EmbeddingError::BadShape { len: data.len() });
            }
            data.len() / dim
        };
        let m = EmbeddingMatrix {
            rows,
            dim,
            data,
            kind,
            source_tag: source_tag.into(),
        };
        m.check_values()?;
        Ok(m)
    }

    /// Builds a matrix from raw rows, L2-normalizing each one.
    pub fn from_rows_normalized<R: AsRef<[f32]>>(
        kind: EmbeddingKind,
        rows: &[R],
        source_tag: impl Into<String>,
    ) -> Result<Self, EmbeddingError> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(EmbeddingError::RaggedRow {
                    row: i,
                    expected: dim,
                    actual: row.len(),
                });
            }
            if let Some(col) = row.iter().position(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite { row: i, col });
            }
            let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(EmbeddingError::ZeroRow(i));
            }
            data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
        }
        EmbeddingMatrix::new(kind, dim, data, source_tag)
    }

    fn check_values(&self) -> Result<(), EmbeddingError> {
        for (r, row) in self.iter_rows().enumerate() {
            if let Some(col) = row.iter().position(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite { row: r, col });
            }
            let norm = dot(row, row).sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(EmbeddingError::Unnormalized { row: r, norm });
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            rows: indices.len(),
            dim: self.dim,
            data,
            kind: self.kind,
            source_tag: self.source_tag.clone(),
        }
    }

    /// Stacks matrices of equal dimensionality. The result takes the kind and
    /// tag of the first part.
    pub fn concat(parts: &[&EmbeddingMatrix]) -> Result<EmbeddingMatrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero matrices"))?;
        let mut data = Vec::new();
        for p in parts {
            if p.dim != first.dim {
                return Err(Error::DimensionMismatch(first.dim, p.dim));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(EmbeddingMatrix {
            rows: parts.iter().map(|p| p.rows).sum(),
            dim: first.dim,
            data,
            kind: first.kind,
            source_tag: first.source_tag.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, EmbeddingError> {
        let tag = self.source_tag.as_bytes();
        let tag_len = u16::try_from(tag.len()).map_err(|_| EmbeddingError::TagTooLong)?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4 + 2 + tag.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(self.kind.to_byte());
        out.extend_from_slice(&[0, 0, 0]);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&tag_len.to_le_bytes());
        out.extend_from_slice(tag);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbeddingError> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(EmbeddingError::NotEmbeddingFile);
        }
        need(bytes, HEADER_LEN)?;
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(EmbeddingError::UnsupportedVersion(version));
        }
        let rows = u32_at(8) as usize;
        let dim = u32_at(12) as usize;
        let kind = EmbeddingKind::from_byte(bytes[16])?;
        if bytes[17..20] != [0, 0, 0] {
            return Err(EmbeddingError::BadPadding);
        }
        let payload_end = HEADER_LEN + rows * dim * 4;
        need(bytes, payload_end + 2)?;
        let data: Vec<f32> = bytes[HEADER_LEN..payload_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tag_len = u16::from_le_bytes([bytes[payload_end], bytes[payload_end + 1]]) as usize;
        let tag_end = payload_end + 2 + tag_len;
        need(bytes, tag_end)?;
        if bytes.len() > tag_end {
            return Err(EmbeddingError::TrailingBytes(bytes.len() - tag_end));
        }
        let source_tag = std::str::from_utf8(&bytes[payload_end + 2..tag_end])
            .map_err(|_| EmbeddingError::BadTag)?
            .to_string();
        let m = EmbeddingMatrix {
            rows,
            dim,
            data,
            kind,
            source_tag,
        };
        m.check_values()?;
        Ok(m)
    }
}

fn need(bytes: &[u8], expected: usize) -> Result<(), EmbeddingError> {
    if bytes.len() < expected {
        Err(EmbeddingError::ShortRead {
            expected,
            actual: bytes.len(),
        })
    } else {
        Ok(())
    }
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(EmbeddingMatrix::from_bytes(&bytes)?)
}

pub fn write_embeddings(path: &Path, matrix: &EmbeddingMatrix) -> Result<()> {
    let bytes = matrix.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Id list written next to an embedding file: `name.emb1` → `name.ids.txt`.
pub fn ids_path(path: &Path) -> PathBuf {
    path.with_extension("ids.txt")
}

/// One id per line; blank lines are skipped.
pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Dot product accumulated in `f64`.
#[inline]
pub(crate) fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(u.len(), v.len()));
    }
    Ok(dot(u, v).clamp(-1.0, 1.0))
}

/// Highest cosine between `query` and any bank row, with the row index.
/// Ties resolve to the lowest index.
pub fn max_similarity(query: &[f32], bank: &EmbeddingMatrix) -> Result<(f64, usize)> {
    if bank.is_empty() {
        return Err(Error::contract("max_similarity over an empty bank"));
    }
    if query.len() != bank.dim() {
        return Err(Error::DimensionMismatch(query.len(), bank.dim()));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (j, row) in bank.iter_rows().enumerate() {
        let s = dot(query, row).clamp(-1.0, 1.0);
        if s > best.0 {
            best = (s, j);
        }
    }
    Ok(best)
}
