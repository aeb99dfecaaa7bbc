//! Shared rollout path (select → render → generate → score) and metric
//! tables.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, DialogueCase, TokenizeMode};
use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::generator::{generate, GenRequest, Generator};
use crate::metrics::{score_pair, MetricReport};
use crate::prompt::PromptTemplate;
use crate::selection::Selector;

/// Decoding parameters sent with every generation request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeParams {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub timeout: Duration,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            max_new_tokens: 64,
            temperature: 0.0,
            timeout: Duration::from_secs(60),
        }
    }
}

/// Everything needed to turn a demonstration into scored generator output.
pub struct RewardEnv<'a> {
    pub corpus: &'a CorpusSplit,
    pub template: &'a PromptTemplate,
    pub generator: &'a dyn Generator,
    pub mode: TokenizeMode,
    pub decode: DecodeParams,
    index: HashMap<&'a str, &'a DialogueCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub test_id: String,
    pub demo_ids: Vec<String>,
    pub generated: String,
    pub report: MetricReport,
}

impl<'a> RewardEnv<'a> {
    pub fn new(corpus: &'a CorpusSplit, template: &'a PromptTemplate, generator: &'a dyn Generator) -> Self {
        RewardEnv {
            corpus,
            template,
            generator,
            mode: TokenizeMode::Word,
            decode: DecodeParams::default(),
            index: corpus.index(),
        }
    }

    pub fn with_mode(mut self, mode: TokenizeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_decode(mut self, decode: DecodeParams) -> Self {
        self.decode = decode;
        self
    }

    pub fn case(&self, id: &str) -> Result<&'a DialogueCase> {
        self.index.get(id).copied().ok_or_else(|| Error::UnknownCase(id.to_string()))
    }

    /// Renders the prompt for `test` with `demo_ids`, generates and scores
    /// against the gold rewrite.
    pub fn rollout(&self, test: &DialogueCase, demo_ids: &[String]) -> Result<CaseResult> {
        let demos: Vec<&DialogueCase> = demo_ids.iter().map(|id| self.case(id)).collect::<Result<_>>()?;
        let prompt = self.template.render(&demos, test)?;
        let req = GenRequest {
            prompt,
            max_new_tokens: self.decode.max_new_tokens,
            temperature: self.decode.temperature,
            timeout: self.decode.timeout,
        };
        let resp = generate(self.generator, &req)?;
        let report = score_pair(&resp.text, test.rewrite_or_err()?, &test.incomplete, self.mode)?;
        Ok(CaseResult {
            test_id: test.id.clone(),
            demo_ids: demo_ids.to_vec(),
            generated: resp.text,
            report,
        })
    }
}

/// Maps `f` over `items`, on a dedicated pool of `jobs` threads when
/// `jobs > 1`. Output order follows input order.
pub fn par_map<T, U, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    if jobs <= 1 || items.len() <= 1 {
        return Ok(items.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean: MetricReport,
    pub cases: Vec<CaseResult>,
}

/// Runs `selector` on every case of `cases` and averages the metrics.
pub fn evaluate_selector(
    env: &RewardEnv<'_>,
    selector: &Selector,
    cases: &[DialogueCase],
    table: Option<&EmbeddingTable>,
    k: usize,
    jobs: usize,
) -> Result<Evaluation> {
    let candidates = &env.corpus.candidates;
    let candidate_ids = env.corpus.candidate_ids();
    let results = par_map(jobs, cases, |test| {
        let demo_ids = selector.select(test, candidates, &candidate_ids, table, k)?;
        env.rollout(test, &demo_ids)
    })?;
    let cases = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        mean: MetricReport::mean(cases.iter().map(|c| &c.report)),
        cases,
    })
}

/// Aligned text table, scores ×100 with two decimals, columns
/// RL R1 R2 | B1..B4 | F1..F3.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let label_width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("Model".len());
    let mut out = String::new();
    let _ = write!(out, "{:<label_width$}", "Model");
    for (i, name) in MetricReport::COLUMN_NAMES.iter().enumerate() {
        if i == 3 || i == 7 {
            out.push_str(" |");
        }
        let _ = write!(out, " {name:>6}");
    }
    out.push('\n');
    for (label, report) in rows {
        let _ = write!(out, "{label:<label_width$}");
        for (i, v) in report.columns().iter().enumerate() {
            if i == 3 || i == 7 {
                out.push_str(" |");
            }
            let _ = write!(out, " {:>6.2}", v * 100.0);
        }
        out.push('\n');
    }
    out
}
