//! Dense case representations: an external vectors file or a seeded
//! character-trigram hashing featurizer.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::DialogueCase;
use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};

/// Id-indexed dense vectors sharing one dimension. Vectors are stored as
/// given; scoring normalizes internally.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    index: HashMap<String, usize>,
    ids: Vec<String>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub records: usize,
    /// Ids that appeared on more than one line; the last line wins.
    pub duplicate_ids: usize,
}

#[derive(Serialize, Deserialize)]
struct VectorRecord {
    id: String,
    vector: Vec<f64>,
}

fn validate(id: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidVector {
            id: id.to_string(),
            reason: "non-finite component".into(),
        });
    }
    if v.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidVector {
            id: id.to_string(),
            reason: "all-zero vector".into(),
        });
    }
    Ok(())
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        EmbeddingTable {
            dim,
            index: HashMap::new(),
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Inserts or replaces the vector for `id`.
    pub fn insert(&mut self, id: &str, vector: Vec<f64>) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        validate(id, &vector)?;
        if let Some(&row) = self.index.get(id) {
            self.data[row * self.dim..(row + 1) * self.dim].copy_from_slice(&vector);
            return Ok(true);
        }
        self.index.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.data.extend_from_slice(&vector);
        Ok(false)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index
            .get(id)
            .map(|&row| &self.data[row * self.dim..(row + 1) * self.dim])
    }

    pub fn vector(&self, id: &str) -> Result<&[f64]> {
        self.get(id).ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }

    pub fn require<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for id in ids {
            self.vector(id)?;
        }
        Ok(())
    }

    /// Builds a table by hashing every case.
    pub fn from_cases<'a>(cases: impl IntoIterator<Item = &'a DialogueCase>, dim: usize, seed: u64) -> Self {
        let mut table = EmbeddingTable::new(dim);
        for case in cases {
            table
                .insert(&case.id, hash_featurize(case, dim, seed))
                .expect("hashed vectors are finite and nonzero");
        }
        table
    }
}

/// Reads a vectors file and checks it against `expected_ids`.
pub fn load_vectors(path: &Path, expected_ids: &HashSet<String>) -> Result<(EmbeddingTable, LoadReport)> {
    let records: Vec<(usize, VectorRecord)> = read_jsonl(path)?;
    let Some((_, first)) = records.first() else {
        return Err(Error::record(path, 0, "vectors file is empty"));
    };
    let mut table = EmbeddingTable::new(first.vector.len().max(1));
    let mut report = LoadReport::default();
    for (line, rec) in records {
        let replaced = table.insert(&rec.id, rec.vector).map_err(|e| match e {
            Error::DimMismatch { .. } | Error::InvalidVector { .. } => {
                Error::record(path, line, e.to_string())
            }
            other => other,
        })?;
        report.records += 1;
        if replaced {
            report.duplicate_ids += 1;
        }
    }
    let mut missing: Vec<&String> = expected_ids.iter().filter(|id| table.get(id).is_none()).collect();
    missing.sort();
    if let Some(id) = missing.first() {
        return Err(Error::MissingEmbedding((*id).clone()));
    }
    if report.duplicate_ids > 0 {
        log::warn!("{}: {} duplicate id line(s), last wins", path.display(), report.duplicate_ids);
    }
    Ok((table, report))
}

pub fn save_vectors(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let records: Vec<VectorRecord> = table
        .ids()
        .iter()
        .map(|id| VectorRecord {
            id: id.clone(),
            vector: table.get(id).expect("own id").to_vec(),
        })
        .collect();
    write_jsonl(path, &records)
}

const MIN_HASH_DIM: usize = 16;

/// Signed feature hashing of character trigrams of the case's context and
/// incomplete utterance, L2-normalized.
///
/// Trigrams hash into the first `dim - 1` buckets; the last bucket holds a
/// constant bias so the vector is never zero.
pub fn hash_featurize(case: &DialogueCase, dim: usize, seed: u64) -> Vec<f64> {
    hash_text(&case.query_text(), dim, seed)
}

pub fn hash_text(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= MIN_HASH_DIM, "hash dim must be at least {MIN_HASH_DIM}");
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let buckets = (dim - 1) as u64;
    let mut v = vec![0.0; dim];
    let mut buf = [0u8; 12];
    for gram in chars.windows(3) {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        for (i, c) in gram.iter().enumerate() {
            buf[i * 4..i * 4 + 4].copy_from_slice(&(*c as u32).to_le_bytes());
        }
        hasher.update(buf);
        let digest = hasher.finalize();
        let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[(h % buckets) as usize] += sign;
    }
    v[dim - 1] += 1.0;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
