//! Complexity statistics of selected examples, complexity-based selection
//! and hyperparameter sweeps.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::top_k;
use crate::corpus::{tokenize, CorpusSplit, DialogueCase, TokenizeMode};
use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_selector, RewardEnv};
use crate::generator::Generator;
use crate::metrics::MetricReport;
use crate::prompt::PromptTemplate;
use crate::rng::substream;
use crate::selection::Selector;
use crate::trainer::{fit, TrainConfig};

pub const POS_KEY: &str = "pos_type_count";
pub const CHUNK_KEY: &str = "chunk_count";
pub const REWRITE_POS_KEY: &str = "rewrite_pos_type_count";
pub const REWRITE_CHUNK_KEY: &str = "rewrite_chunk_count";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComplexityMetric {
    Length,
    Pos,
    Chunk,
}

impl std::str::FromStr for ComplexityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "length" => Ok(ComplexityMetric::Length),
            "pos" => Ok(ComplexityMetric::Pos),
            "chunk" => Ok(ComplexityMetric::Chunk),
            _ => Err(Error::InvalidArgument(format!("unknown complexity metric {s:?}"))),
        }
    }
}

/// Averages over every selected example (with multiplicity). Annotation
/// means are `None` unless every selected example carries the annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityStats {
    pub mean_incomplete_len: f64,
    pub mean_rewrite_len: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_pos_types: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_chunks: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_rewrite_pos_types: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_rewrite_chunks: Option<f64>,
    pub n: usize,
}

fn mean_annotation(cases: &[&DialogueCase], key: &str) -> Option<f64> {
    let values: Option<Vec<i64>> = cases.iter().map(|c| c.annotation(key)).collect();
    let values = values?;
    Some(values.iter().sum::<i64>() as f64 / values.len() as f64)
}

pub fn complexity_of_selection(
    corpus: &CorpusSplit,
    selections: &[(String, Vec<String>)],
    mode: TokenizeMode,
) -> Result<ComplexityStats> {
    let index = corpus.index();
    let selected: Vec<&DialogueCase> = selections
        .iter()
        .flat_map(|(_, ids)| ids)
        .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::UnknownCase(id.clone())))
        .collect::<Result<_>>()?;
    if selected.is_empty() {
        return Err(Error::InvalidArgument("no selected examples".into()));
    }
    let n = selected.len() as f64;
    let inc: usize = selected.iter().map(|c| tokenize(&c.incomplete, mode).len()).sum();
    let rew: usize = selected
        .iter()
        .map(|c| c.rewrite.as_deref().map_or(0, |r| tokenize(r, mode).len()))
        .sum();
    Ok(ComplexityStats {
        mean_incomplete_len: inc as f64 / n,
        mean_rewrite_len: rew as f64 / n,
        mean_pos_types: mean_annotation(&selected, POS_KEY),
        mean_chunks: mean_annotation(&selected, CHUNK_KEY),
        mean_rewrite_pos_types: mean_annotation(&selected, REWRITE_POS_KEY),
        mean_rewrite_chunks: mean_annotation(&selected, REWRITE_CHUNK_KEY),
        n: selected.len(),
    })
}

/// Two column groups (Incomplete, Rewritten), each Length/POS/Chunk.
/// Missing annotations print as `-`.
pub fn format_complexity(rows: &[(String, ComplexityStats)]) -> String {
    let w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("Model".len());
    let cell = |v: Option<f64>| v.map_or_else(|| format!("{:>7}", "-"), |x| format!("{x:>7.2}"));
    let mut out = String::new();
    let _ = writeln!(out, "{:<w$} | {:^23} | {:^23}", "", "Incomplete", "Rewritten");
    let _ = writeln!(
        out,
        "{:<w$} | {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7}",
        "Model", "Length", "POS", "Chunk", "Length", "POS", "Chunk"
    );
    for (label, s) in rows {
        let _ = writeln!(
            out,
            "{label:<w$} | {} {} {} | {} {} {}",
            cell(Some(s.mean_incomplete_len)),
            cell(s.mean_pos_types),
            cell(s.mean_chunks),
            cell(Some(s.mean_rewrite_len)),
            cell(s.mean_rewrite_pos_types),
            cell(s.mean_rewrite_chunks),
        );
    }
    out
}

/// Top-`k` candidates by a complexity measure of the incomplete utterance,
/// descending, ties by smaller id.
pub fn select_by_complexity(candidates: &[DialogueCase], metric: ComplexityMetric, k: usize) -> Result<Vec<String>> {
    if k > candidates.len() {
        return Err(Error::TooFewCandidates {
            k,
            available: candidates.len(),
        });
    }
    let scored = candidates
        .iter()
        .map(|c| {
            let v = match metric {
                ComplexityMetric::Length => tokenize(&c.incomplete, TokenizeMode::Word).len() as f64,
                ComplexityMetric::Pos | ComplexityMetric::Chunk => {
                    let key = if metric == ComplexityMetric::Pos { POS_KEY } else { CHUNK_KEY };
                    c.annotation(key).ok_or_else(|| Error::MissingField {
                        id: c.id.clone(),
                        field: if metric == ComplexityMetric::Pos { POS_KEY } else { CHUNK_KEY },
                    })? as f64
                }
            };
            Ok((c.id.clone(), v))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(top_k(scored, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Shots,
    Candidates,
    TrainSize,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shots" => Ok(SweepAxis::Shots),
            "candidates" => Ok(SweepAxis::Candidates),
            "train_size" | "train-size" => Ok(SweepAxis::TrainSize),
            _ => Err(Error::InvalidArgument(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub axis: SweepAxis,
    pub value: usize,
    pub best_dev: f64,
    pub report: MetricReport,
}

fn subsample(cases: &[DialogueCase], n: usize, seed: u64, tag: &str) -> Result<Vec<DialogueCase>> {
    if n == 0 || n > cases.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot take {n} of {} cases",
            cases.len()
        )));
    }
    let mut pool = cases.to_vec();
    pool.shuffle(&mut substream(seed, "sweep", &[tag]));
    pool.truncate(n);
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(pool)
}

/// Trains and evaluates (greedy, dev split) once per value of `axis`.
/// Candidate and training subsets are re-sampled from their own pools, so
/// they stay disjoint.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    axis: SweepAxis,
    values: &[usize],
    corpus: &CorpusSplit,
    table: &EmbeddingTable,
    template: &PromptTemplate,
    generator: &dyn Generator,
    base: &TrainConfig,
    mode: TokenizeMode,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        let mut split = corpus.clone();
        let tag = format!("{axis:?}-{value}");
        let label = match axis {
            SweepAxis::Shots => {
                cfg.shots = value;
                format!("Ours-{value}")
            }
            SweepAxis::Candidates => {
                split.candidates = subsample(&corpus.candidates, value, base.seed, &tag)?;
                format!("Ours #C={value}")
            }
            SweepAxis::TrainSize => {
                split.train = subsample(&corpus.train, value, base.seed, &tag)?;
                format!("Ours #T={value}")
            }
        };
        split.check_disjoint()?;
        let env = RewardEnv::new(&split, template, generator).with_mode(mode);
        let result = fit(&env, table, &cfg)?;
        let eval = evaluate_selector(
            &env,
            &Selector::Policy(result.best.params()?),
            &split.dev,
            Some(table),
            cfg.shots,
            cfg.jobs,
        )?;
        rows.push(SweepRow {
            label,
            axis,
            value,
            best_dev: result.best_dev,
            report: eval.mean,
        });
    }
    Ok(rows)
}

/// Column lookup for a sweep table keyed by label.
pub fn sweep_table(rows: &[SweepRow]) -> Vec<(String, MetricReport)> {
    rows.iter().map(|r| (r.label.clone(), r.report)).collect()
}
