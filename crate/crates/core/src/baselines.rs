//! Non-learned selectors: uniform random, BM25 and cosine kNN.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Deserialize;

use crate::corpus::{tokenize, DialogueCase, TokenizeMode};
use crate::encoder::{cosine, EmbeddingTable};
use crate::error::{Error, Result};
use crate::io::read_jsonl;

/// Uniform random `k`-subset without replacement, in draw order.
pub fn select_random<R: Rng + ?Sized>(candidates: &[String], k: usize, rng: &mut R) -> Result<Vec<String>> {
    if k > candidates.len() {
        return Err(Error::TooFewCandidates {
            k,
            available: candidates.len(),
        });
    }
    let mut pool = candidates.to_vec();
    let (chosen, _) = pool.partial_shuffle(rng, k);
    Ok(chosen.to_vec())
}

/// Sorts `(id, score)` pairs by descending score, ties by ascending id, and
/// keeps the first `k` ids.
pub fn top_k(mut scored: Vec<(String, f64)>, k: usize) -> Vec<String> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(id, _)| id).collect()
}

/// Token normalization hook applied before indexing and querying, e.g. a
/// stemming table produced by an external tool.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenMap(HashMap<String, String>);

#[derive(Deserialize)]
struct TokenMapRecord {
    token: String,
    stem: String,
}

impl TokenMap {
    /// Reads `{token, stem}` lines.
    pub fn from_file(path: &Path) -> Result<Self> {
        let records: Vec<(usize, TokenMapRecord)> = read_jsonl(path)?;
        Ok(TokenMap(records.into_iter().map(|(_, r)| (r.token, r.stem)).collect()))
    }

    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(pairs: I) -> Self {
        TokenMap(pairs.into_iter().collect())
    }

    pub fn apply(&self, tokens: Vec<String>) -> Vec<String> {
        if self.0.is_empty() {
            return tokens;
        }
        tokens
            .into_iter()
            .map(|t| self.0.get(&t).cloned().unwrap_or(t))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.5, b: 0.75 }
    }
}

/// Okapi BM25 over candidates' context and incomplete utterance tokens.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<String>,
    doc_term_freqs: Vec<HashMap<String, usize>>,
    doc_lengths: Vec<usize>,
    avg_len: f64,
    idf: HashMap<String, f64>,
    params: Bm25Params,
    mode: TokenizeMode,
    token_map: TokenMap,
}

pub fn bm25_idf(n_docs: usize, df: usize) -> f64 {
    let (n, df) = (n_docs as f64, df as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// One term's contribution; nondecreasing in `tf`.
pub fn bm25_term(idf: f64, tf: f64, doc_len: f64, avg_len: f64, params: Bm25Params) -> f64 {
    let norm = params.k1 * (1.0 - params.b + params.b * doc_len / avg_len);
    idf * tf * (params.k1 + 1.0) / (tf + norm)
}

impl Bm25Index {
    pub fn build(
        candidates: &[DialogueCase],
        params: Bm25Params,
        mode: TokenizeMode,
        token_map: TokenMap,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("BM25 index over an empty candidate set".into()));
        }
        let mut ids = Vec::with_capacity(candidates.len());
        let mut doc_term_freqs = Vec::with_capacity(candidates.len());
        let mut doc_lengths = Vec::with_capacity(candidates.len());
        let mut df: HashMap<String, usize> = HashMap::new();
        for case in candidates {
            let tokens = token_map.apply(tokenize(&case.query_text(), mode));
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            ids.push(case.id.clone());
            doc_lengths.push(tokens.len());
            doc_term_freqs.push(tf);
        }
        let total: usize = doc_lengths.iter().sum();
        let avg_len = (total as f64 / candidates.len() as f64).max(f64::MIN_POSITIVE);
        let n = candidates.len();
        let idf = df.into_iter().map(|(t, d)| (t, bm25_idf(n, d))).collect();
        Ok(Bm25Index {
            ids,
            doc_term_freqs,
            doc_lengths,
            avg_len,
            idf,
            params,
            mode,
            token_map,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    /// Scores of every candidate for a query case, in index order. Each
    /// distinct query term counts once.
    pub fn scores(&self, query: &DialogueCase) -> Vec<(String, f64)> {
        let terms: HashSet<String> = self
            .token_map
            .apply(tokenize(&query.query_text(), self.mode))
            .into_iter()
            .collect();
        self.ids
            .iter()
            .enumerate()
            .map(|(d, id)| {
                let tf = &self.doc_term_freqs[d];
                let len = self.doc_lengths[d] as f64;
                let s = terms
                    .iter()
                    .filter_map(|t| {
                        let f = *tf.get(t)?;
                        Some(bm25_term(self.idf[t], f as f64, len, self.avg_len, self.params))
                    })
                    .sum();
                (id.clone(), s)
            })
            .collect()
    }
}

/// Top-`k` candidates by BM25, ties by smaller id. The test case itself is
/// never returned.
pub fn bm25_select(index: &Bm25Index, test: &DialogueCase, k: usize) -> Result<Vec<String>> {
    if index.is_empty() {
        return Err(Error::InvalidArgument("empty BM25 index".into()));
    }
    let scored: Vec<(String, f64)> = index.scores(test).into_iter().filter(|(id, _)| *id != test.id).collect();
    if k > scored.len() {
        return Err(Error::TooFewCandidates {
            k,
            available: scored.len(),
        });
    }
    Ok(top_k(scored, k))
}

/// Top-`k` candidates by cosine similarity to the test vector, ties by
/// smaller id.
pub fn knn_select(table: &EmbeddingTable, candidates: &[String], test_id: &str, k: usize) -> Result<Vec<String>> {
    let x = table.vector(test_id)?;
    let scored = candidates
        .iter()
        .filter(|c| c.as_str() != test_id)
        .map(|c| Ok((c.clone(), cosine(table.vector(c)?, x))))
        .collect::<Result<Vec<_>>>()?;
    if k > scored.len() {
        return Err(Error::TooFewCandidates {
            k,
            available: scored.len(),
        });
    }
    Ok(top_k(scored, k))
}
