//! Selector dispatch and the precomputed selection file format.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{select_by_complexity, ComplexityMetric};
use crate::baselines::{bm25_select, knn_select, select_random, Bm25Index};
use crate::corpus::DialogueCase;
use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::policy::{argmax_demonstration, PolicyParams};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub test_id: String,
    pub demo_ids: Vec<String>,
}

pub fn load_selections(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    let records: Vec<(usize, SelectionRecord)> = read_jsonl(path)?;
    let mut out = HashMap::new();
    for (line, rec) in records {
        if out.insert(rec.test_id.clone(), rec.demo_ids).is_some() {
            return Err(Error::DuplicateId { id: rec.test_id, line });
        }
    }
    Ok(out)
}

pub fn save_selections(path: &Path, records: &[SelectionRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// A demonstration selection strategy.
pub enum Selector {
    /// Per-case uniform draws from the `random-select` substream of `seed`.
    Random { seed: u64 },
    Bm25(Box<Bm25Index>),
    Knn,
    /// Greedy decoding of a trained policy.
    Policy(PolicyParams),
    /// Precomputed demonstrations, e.g. from an external method.
    File(HashMap<String, Vec<String>>),
    Complexity(ComplexityMetric),
}

impl Selector {
    pub fn select(
        &self,
        test: &DialogueCase,
        candidates: &[DialogueCase],
        candidate_ids: &[String],
        table: Option<&EmbeddingTable>,
        k: usize,
    ) -> Result<Vec<String>> {
        let need_table = || table.ok_or_else(|| Error::InvalidArgument("selector needs embeddings".into()));
        match self {
            Selector::Random { seed } => {
                let mut rng = substream(*seed, "random-select", &[test.id.as_str()]);
                select_random(candidate_ids, k, &mut rng)
            }
            Selector::Bm25(index) => bm25_select(index, test, k),
            Selector::Knn => knn_select(need_table()?, candidate_ids, &test.id, k),
            Selector::Policy(params) => {
                Ok(argmax_demonstration(params, need_table()?, candidate_ids, &test.id, k)?.selected)
            }
            Selector::File(map) => {
                let ids = map
                    .get(&test.id)
                    .ok_or_else(|| Error::InvalidArgument(format!("selection file has no entry for {:?}", test.id)))?;
                Ok(ids.iter().take(k).cloned().collect())
            }
            Selector::Complexity(metric) => select_by_complexity(candidates, *metric, k),
        }
    }
}
