// SPDX-License-Identifier: Apache-2.0

//! Template embeddings and fixed-shape session matrices.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::WILDCARD;
use crate::seed::derive_seed;
use crate::session::Session;

pub const EMBEDDINGS_MAGIC: &[u8; 8] = b"LOGEMB01";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("row count mismatch: expected {expected}, file declares {found}")]
    RowCountMismatch { expected: usize, found: usize },
    #[error("non-finite value in row {row}")]
    NonFinite { row: usize },
    #[error("truncated embeddings file: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("not an embeddings file (bad magic)")]
    BadMagic,
    #[error("bad embeddings header: {0}")]
    BadHeader(String),
    #[error("embedding dim must be >= 8, got {0}")]
    DimTooSmall(usize),
    #[error("cannot embed an empty token list")]
    EmptyTokens,
    #[error("template id {id} out of range for table with {rows} rows")]
    TemplateOutOfRange { id: u32, rows: usize },
    #[error("session has no events")]
    EmptySession,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    File,
    Hashed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    rows: usize,
    dim: usize,
    source_name: String,
}

/// Immutable `(rows, dim)` matrix of f32 template vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: Vec<f32>,
    source: EmbeddingSource,
    source_name: String,
}

impl EmbeddingTable {
    pub fn new(
        dim: usize,
        vectors: Vec<f32>,
        source: EmbeddingSource,
        source_name: impl Into<String>,
    ) -> Result<Self, EmbedError> {
        if dim == 0 || !vectors.len().is_multiple_of(dim) {
            return Err(EmbedError::BadHeader(format!(
                "{} values do not form rows of dim {dim}",
                vectors.len()
            )));
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite { row: pos / dim });
        }
        Ok(Self {
            dim,
            vectors,
            source,
            source_name: source_name.into(),
        })
    }

    /// Builds a table from template token lists with [`hashed_embedding`].
    pub fn hashed<S: AsRef<str>>(templates: &[Vec<S>], dim: usize, seed: u64) -> Result<Self, EmbedError> {
        let mut vectors = Vec::with_capacity(templates.len() * dim);
        for tokens in templates {
            vectors.extend(hashed_embedding(tokens, dim, seed)?);
        }
        Self::new(dim, vectors, EmbeddingSource::Hashed, format!("hashed:seed={seed}"))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn row(&self, id: u32) -> Option<&[f32]> {
        let i = id as usize;
        (i < self.rows()).then(|| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&Header {
            rows: self.rows(),
            dim: self.dim,
            source_name: self.source_name.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + 1 + self.vectors.len() * 4);
        out.extend_from_slice(EMBEDDINGS_MAGIC);
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_templates: usize) -> Result<Self, EmbedError> {
        if bytes.len() < 8 || &bytes[..8] != EMBEDDINGS_MAGIC {
            return Err(EmbedError::BadMagic);
        }
        let rest = &bytes[8..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| EmbedError::BadHeader("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&rest[..nl]).map_err(|e| EmbedError::BadHeader(e.to_string()))?;
        if header.rows != expected_templates {
            return Err(EmbedError::RowCountMismatch {
                expected: expected_templates,
                found: header.rows,
            });
        }
        if header.dim == 0 {
            return Err(EmbedError::BadHeader("dim is 0".into()));
        }
        let payload = &rest[nl + 1..];
        let expected = header.rows * header.dim * 4;
        if payload.len() != expected {
            return Err(EmbedError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        let vectors = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(header.dim, vectors, EmbeddingSource::File, header.source_name)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, expected_templates: usize) -> Result<Self, EmbedError> {
        Self::from_bytes(&std::fs::read(path)?, expected_templates)
    }
}

/// Reads an embeddings file written by any external encoder.
pub fn load_embeddings(path: &Path, expected_templates: usize) -> Result<EmbeddingTable, EmbedError> {
    EmbeddingTable::load(path, expected_templates)
}

const SUFFIXES: [&str; 7] = ["ing", "ion", "ed", "es", "er", "ly", "s"];

/// Lower-cases a token, trims punctuation at both ends and strips one
/// inflectional suffix when at least three characters remain.
pub fn stem(token: &str) -> String {
    let t = token.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    for suf in SUFFIXES {
        if let Some(base) = t.strip_suffix(suf) {
            if base.chars().count() >= 3 {
                return base.to_string();
            }
        }
    }
    t
}

/// Deterministic unit-norm bag-of-stems vector.
///
/// Every stem maps to a seeded Gaussian direction; the template vector is
/// the normalised sum. Wildcards are dropped, so templates that share stems
/// end up close in cosine distance.
pub fn hashed_embedding<S: AsRef<str>>(tokens: &[S], dim: usize, seed: u64) -> Result<Vec<f32>, EmbedError> {
    if dim < 8 {
        return Err(EmbedError::DimTooSmall(dim));
    }
    if tokens.is_empty() {
        return Err(EmbedError::EmptyTokens);
    }
    let mut stems: Vec<String> = tokens
        .iter()
        .map(|t| t.as_ref().replace(WILDCARD, ""))
        .map(|t| stem(&t))
        .filter(|s| !s.is_empty())
        .collect();
    if stems.is_empty() {
        stems.push(format!("{WILDCARD}#{}", tokens.len()));
    }
    let mut acc = vec![0f64; dim];
    for s in &stems {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s));
        for a in acc.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *a += z;
        }
    }
    let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(acc.iter().map(|a| (a / norm) as f32).collect())
}

/// One session as an `(l, d)` row-major matrix plus its padding mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionMatrix {
    pub values: Vec<f32>,
    pub mask: Vec<bool>,
    pub label: bool,
}

impl SessionMatrix {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn events(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Looks up the first `l` events of a session; the rest is zero-padded.
pub fn materialize(session: &Session, table: &EmbeddingTable, l: usize) -> Result<SessionMatrix, EmbedError> {
    if session.template_ids.is_empty() || l == 0 {
        return Err(EmbedError::EmptySession);
    }
    let d = table.dim();
    let mut values = vec![0f32; l * d];
    let mut mask = vec![false; l];
    for (i, &id) in session.template_ids.iter().take(l).enumerate() {
        let row = table
            .row(id)
            .ok_or(EmbedError::TemplateOutOfRange { id, rows: table.rows() })?;
        values[i * d..(i + 1) * d].copy_from_slice(row);
        mask[i] = true;
    }
    Ok(SessionMatrix {
        values,
        mask,
        label: session.label,
    })
}

pub fn materialize_all(
    sessions: &[Session],
    table: &EmbeddingTable,
    l: usize,
) -> Result<Vec<SessionMatrix>, EmbedError> {
    sessions.iter().map(|s| materialize(s, table, l)).collect()
}
