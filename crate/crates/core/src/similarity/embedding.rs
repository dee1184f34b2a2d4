//! Precomputed embedding tables and the cosine backend over them.
//!
//! File format, one record per line:
//!
//! ```text
//! {"key": "<hex sha256 of the UTF-8 text>", "text_prefix": "<first 64 chars>", "vector": [f, ...]}
//! ```
//!
//! Vectors must share one dimension and be unit-norm within `1e-4`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{clamp_score, SimilarityError, SimilarityProvider};

/// Identifies the key derivation; writers and readers must agree on it.
pub const HASH_RULE: &str = "sha256-utf8-hex-v1";

/// Number of leading characters stored next to each key for collision checks.
pub const PREFIX_CHARS: usize = 64;

const NORM_TOLERANCE: f64 = 1e-4;

/// Lowercase hex SHA-256 of the exact UTF-8 bytes of `text`.
pub fn content_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn text_prefix(text: &str) -> String {
    text.chars().take(PREFIX_CHARS).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub key: String,
    pub text_prefix: String,
    pub vector: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn for_text(text: &str, vector: Vec<f64>) -> Self {
        EmbeddingRecord {
            key: content_key(text),
            text_prefix: text_prefix(text),
            vector,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    dim: Option<usize>,
    entries: HashMap<String, (String, Vec<f64>)>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self, SimilarityError> {
        let reader = BufReader::new(File::open(path)?);
        let mut table = EmbeddingTable::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| SimilarityError::EmbeddingFile {
                line: i + 1,
                message: e.to_string(),
            })?;
            table
                .insert(rec)
                .map_err(|message| SimilarityError::EmbeddingFile { line: i + 1, message })?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, rec: EmbeddingRecord) -> Result<(), String> {
        if rec.key.len() != 64 || !rec.key.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(format!("key `{}` is not a {HASH_RULE} digest", rec.key));
        }
        if rec.vector.is_empty() {
            return Err("empty vector".into());
        }
        if let Some(d) = self.dim.filter(|&d| d != rec.vector.len()) {
            return Err(format!("dimension {} differs from {d}", rec.vector.len()));
        }
        let norm = rec.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(format!("vector norm {norm} is not 1 within {NORM_TOLERANCE}"));
        }
        if let Some((prefix, _)) = self.entries.get(&rec.key) {
            if *prefix != rec.text_prefix {
                return Err(format!("key {} stored twice with different prefixes", rec.key));
            }
        }
        self.dim = Some(rec.vector.len());
        self.entries.insert(rec.key, (rec.text_prefix, rec.vector));
        Ok(())
    }

    pub fn lookup(&self, text: &str) -> Result<&[f64], SimilarityError> {
        let key = content_key(text);
        let prefix = text_prefix(text);
        match self.entries.get(&key) {
            None => Err(SimilarityError::MissingEmbedding { prefix }),
            Some((stored, _)) if *stored != prefix => Err(SimilarityError::HashCollision {
                key,
                stored: stored.clone(),
                text: prefix,
            }),
            Some((_, v)) => Ok(v),
        }
    }
}

/// Cosine similarity mapped to `[0, 1]` by `(1 + cos) / 2`.
pub(crate) fn cosine01(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.5;
    }
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    (1.0 + cos) / 2.0
}

#[derive(Debug, Clone)]
pub struct CosineBackend {
    table: EmbeddingTable,
    id: String,
}

impl CosineBackend {
    pub fn new(table: EmbeddingTable, model_label: &str) -> Self {
        let id = format!(
            "cosine:{model_label}:{HASH_RULE}:dim{}:affine01",
            table.dim().unwrap_or(0)
        );
        CosineBackend { table, id }
    }

    pub fn from_file(path: &Path) -> Result<Self, SimilarityError> {
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self::new(EmbeddingTable::load(path)?, &label))
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }
}

impl SimilarityProvider for CosineBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn sim(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        let va = self.table.lookup(a)?;
        let vb = self.table.lookup(b)?;
        clamp_score(&self.id, cosine01(va, vb))
    }
}
