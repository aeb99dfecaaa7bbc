//! Sentence-level ROUGE, BLEU and restoration F-score.
//!
//! Every score lies in `[0, 1]`; reports print them multiplied by 100.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, TokenizeMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    /// BLEU-1 through BLEU-4.
    pub bleu: [f64; 4],
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    /// Restoration F-score for n = 1, 2, 3.
    pub fscore: [f64; 3],
}

impl MetricReport {
    /// Values in table order: RL R1 R2 B1 B2 B3 B4 F1 F2 F3.
    pub fn columns(&self) -> [f64; 10] {
        [
            self.rouge_l,
            self.rouge1,
            self.rouge2,
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.fscore[0],
            self.fscore[1],
            self.fscore[2],
        ]
    }

    pub const COLUMN_NAMES: [&'static str; 10] =
        ["RL", "R1", "R2", "B1", "B2", "B3", "B4", "F1", "F2", "F3"];

    /// Field-wise mean. Empty input yields all zeros.
    pub fn mean<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> MetricReport {
        let mut acc = MetricReport::default();
        let mut n = 0usize;
        for r in reports {
            n += 1;
            for i in 0..4 {
                acc.bleu[i] += r.bleu[i];
            }
            for i in 0..3 {
                acc.fscore[i] += r.fscore[i];
            }
            acc.rouge1 += r.rouge1;
            acc.rouge2 += r.rouge2;
            acc.rouge_l += r.rouge_l;
        }
        if n == 0 {
            return acc;
        }
        let n = n as f64;
        acc.bleu.iter_mut().for_each(|v| *v /= n);
        acc.fscore.iter_mut().for_each(|v| *v /= n);
        acc.rouge1 /= n;
        acc.rouge2 /= n;
        acc.rouge_l /= n;
        acc
    }
}

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram matches plus the n-gram totals of each side.
fn ngram_overlap(hyp: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let h_total = hyp.len().saturating_sub(n - 1).min(hyp.len());
    let r_total = reference.len().saturating_sub(n - 1).min(reference.len());
    (matches, h_total, r_total)
}

fn f1(matches: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if hyp_total == 0 || ref_total == 0 || matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / hyp_total as f64;
    let r = matches as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

pub fn rouge_n(hyp: &[String], reference: &[String], n: usize) -> f64 {
    assert!(n >= 1, "rouge_n order must be >= 1");
    let (m, h, r) = ngram_overlap(hyp, reference, n);
    f1(m, h, r)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(hyp: &[String], reference: &[String]) -> f64 {
    f1(lcs_len(hyp, reference), hyp.len(), reference.len())
}

/// Sentence BLEU up to order `n` (1..=4), uniform weights.
///
/// Orders above one with no matching n-gram use add-one smoothing,
/// `(0 + 1) / (total + 1)`. A zero unigram precision gives 0.
pub fn bleu_n(hyp: &[String], reference: &[String], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "bleu order must be in 1..=4");
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (m, h_total, _) = ngram_overlap(hyp, reference, order);
        let p = if m > 0 {
            m as f64 / h_total as f64
        } else if order == 1 {
            return 0.0;
        } else {
            1.0 / (h_total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let bp = (1.0 - reference.len() as f64 / hyp.len() as f64).exp().min(1.0);
    bp * (log_sum / n as f64).exp()
}

/// Tokens of `tokens` left after removing one occurrence per token of
/// `incomplete` (multiset difference), in original order.
pub fn restored_span(tokens: &[String], incomplete: &[String]) -> Vec<String> {
    let mut budget: HashMap<&str, usize> = HashMap::new();
    for t in incomplete {
        *budget.entry(t.as_str()).or_insert(0) += 1;
    }
    tokens
        .iter()
        .filter(|t| match budget.get_mut(t.as_str()) {
            Some(c) if *c > 0 => {
                *c -= 1;
                false
            }
            _ => true,
        })
        .cloned()
        .collect()
}

/// n-gram F1 restricted to the tokens each side adds beyond the incomplete
/// utterance. Both spans empty scores 1; an empty reference span with a
/// nonempty hypothesis span scores 0.
pub fn restoration_fscore(hyp: &[String], reference: &[String], incomplete: &[String], n: usize) -> f64 {
    let rh = restored_span(hyp, incomplete);
    let rr = restored_span(reference, incomplete);
    match (rh.is_empty(), rr.is_empty()) {
        (true, true) => 1.0,
        (false, true) => 0.0,
        _ => rouge_n(&rh, &rr, n),
    }
}

pub fn report_from_tokens(hyp: &[String], reference: &[String], incomplete: &[String]) -> MetricReport {
    MetricReport {
        bleu: [1, 2, 3, 4].map(|n| bleu_n(hyp, reference, n)),
        rouge1: rouge_n(hyp, reference, 1),
        rouge2: rouge_n(hyp, reference, 2),
        rouge_l: rouge_l(hyp, reference),
        fscore: [1, 2, 3].map(|n| restoration_fscore(hyp, reference, incomplete, n)),
    }
}

pub fn score_pair(hyp: &str, reference: &str, incomplete: &str, mode: TokenizeMode) -> Result<MetricReport> {
    let r = tokenize(reference, mode);
    if r.is_empty() {
        return Err(Error::InvalidArgument("empty reference".into()));
    }
    Ok(report_from_tokens(
        &tokenize(hyp, mode),
        &r,
        &tokenize(incomplete, mode),
    ))
}
