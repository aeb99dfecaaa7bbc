//! Definitional re-implementations used as test oracles.
//!
//! Written straight from the metric and ranking definitions, without sharing
//! code with the crate: plain loops, recursion and full rescans instead of
//! the crate's counting tables and DP.

#![allow(dead_code)]

use std::collections::HashMap;

use demoselect::{tokenize, DialogueCase, TokenizeMode};
use rand::seq::IndexedRandom;
use rand::Rng;

pub mod metric {
    use super::*;

    fn grams(tokens: &[String], n: usize) -> Vec<&[String]> {
        if tokens.len() < n {
            return Vec::new();
        }
        (0..=tokens.len() - n).map(|i| &tokens[i..i + n]).collect()
    }

    /// Clipped matches: each hypothesis n-gram occurrence matches while the
    /// reference still has an unused copy.
    fn clipped(hyp: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
        let h = grams(hyp, n);
        let r = grams(reference, n);
        let mut used = vec![false; r.len()];
        let mut matched = 0;
        for g in &h {
            if let Some(pos) = (0..r.len()).find(|&j| !used[j] && r[j] == *g) {
                used[pos] = true;
                matched += 1;
            }
        }
        (matched, h.len(), r.len())
    }

    fn f1(matched: usize, h: usize, r: usize) -> f64 {
        if h == 0 || r == 0 {
            return 0.0;
        }
        let p = matched as f64 / h as f64;
        let rc = matched as f64 / r as f64;
        if p + rc == 0.0 {
            0.0
        } else {
            2.0 * p * rc / (p + rc)
        }
    }

    pub fn rouge_n(hyp: &[String], reference: &[String], n: usize) -> f64 {
        let (m, h, r) = clipped(hyp, reference, n);
        f1(m, h, r)
    }

    /// Memoized recursive LCS.
    pub fn lcs(a: &[String], b: &[String]) -> usize {
        fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
            if i == a.len() || j == b.len() {
                return 0;
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let v = if a[i] == b[j] {
                1 + go(a, b, i + 1, j + 1, memo)
            } else {
                go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
            };
            memo.insert((i, j), v);
            v
        }
        go(a, b, 0, 0, &mut HashMap::new())
    }

    pub fn rouge_l(hyp: &[String], reference: &[String]) -> f64 {
        f1(lcs(hyp, reference), hyp.len(), reference.len())
    }

    /// Geometric mean of modified precisions (add-one on zero-count orders
    /// above 1) times the brevity penalty.
    pub fn bleu(hyp: &[String], reference: &[String], n: usize) -> f64 {
        if hyp.is_empty() {
            return 0.0;
        }
        let mut product = 1.0f64;
        for order in 1..=n {
            let (m, h, _) = clipped(hyp, reference, order);
            let p = if m == 0 && order > 1 {
                1.0 / (h as f64 + 1.0)
            } else if h == 0 {
                0.0
            } else {
                m as f64 / h as f64
            };
            product *= p;
        }
        if product == 0.0 {
            return 0.0;
        }
        let bp = if hyp.len() >= reference.len() {
            1.0
        } else {
            (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
        };
        bp * product.powf(1.0 / n as f64)
    }

    /// Drops the first `count(incomplete, t)` occurrences of every token.
    pub fn restored(tokens: &[String], incomplete: &[String]) -> Vec<String> {
        let mut out = Vec::new();
        for (i, t) in tokens.iter().enumerate() {
            let seen_before = tokens[..i].iter().filter(|x| *x == t).count();
            let allowance = incomplete.iter().filter(|x| *x == t).count();
            if seen_before >= allowance {
                out.push(t.clone());
            }
        }
        out
    }

    pub fn fscore(hyp: &[String], reference: &[String], incomplete: &[String], n: usize) -> f64 {
        let rh = restored(hyp, incomplete);
        let rr = restored(reference, incomplete);
        if rr.is_empty() {
            return if rh.is_empty() { 1.0 } else { 0.0 };
        }
        rouge_n(&rh, &rr, n)
    }

    /// RL R1 R2 B1..B4 F1..F3.
    pub fn columns(hyp: &[String], reference: &[String], incomplete: &[String]) -> [f64; 10] {
        [
            rouge_l(hyp, reference),
            rouge_n(hyp, reference, 1),
            rouge_n(hyp, reference, 2),
            bleu(hyp, reference, 1),
            bleu(hyp, reference, 2),
            bleu(hyp, reference, 3),
            bleu(hyp, reference, 4),
            fscore(hyp, reference, incomplete, 1),
            fscore(hyp, reference, incomplete, 2),
            fscore(hyp, reference, incomplete, 3),
        ]
    }
}

pub mod rank {
    use super::*;

    /// Sorts by descending score; scores within `1e-12` count as ties and
    /// fall back to ascending id.
    pub fn top_k(mut scored: Vec<(String, f64)>, k: usize) -> Vec<String> {
        scored.sort_by(|a, b| {
            if (a.1 - b.1).abs() <= 1e-12 {
                a.0.cmp(&b.0)
            } else {
                b.1.partial_cmp(&a.1).unwrap()
            }
        });
        scored.into_iter().take(k).map(|(id, _)| id).collect()
    }

    /// Okapi BM25 over each distinct query term, recounting document
    /// frequencies by scanning the whole collection per term.
    pub fn bm25_scores(docs: &[DialogueCase], query: &DialogueCase, k1: f64, b: f64) -> Vec<(String, f64)> {
        let toks: Vec<Vec<String>> = docs
            .iter()
            .map(|d| tokenize(&d.query_text(), TokenizeMode::Word))
            .collect();
        let n = docs.len() as f64;
        let avg = toks.iter().map(|t| t.len()).sum::<usize>() as f64 / n;
        let mut terms = tokenize(&query.query_text(), TokenizeMode::Word);
        terms.sort();
        terms.dedup();
        docs.iter()
            .zip(&toks)
            .map(|(d, dt)| {
                let mut s = 0.0;
                for term in &terms {
                    let df = toks.iter().filter(|t| t.contains(term)).count() as f64;
                    let tf = dt.iter().filter(|t| *t == term).count() as f64;
                    if tf == 0.0 {
                        continue;
                    }
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dt.len() as f64 / avg));
                }
                (d.id.clone(), s)
            })
            .collect()
    }

    pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..a.len() {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        dot / (na.sqrt() * nb.sqrt())
    }
}

pub mod policy {
    /// `|c·(W x)| / (|c| |x|)` with `W` row-major, computed as a double sum.
    pub fn score(w: &[f64], dim: usize, c: &[f64], x: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                s += c[i] * w[i * dim + j] * x[j];
            }
        }
        let nc: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        s.abs() / (nc * nx)
    }

    /// Chain-rule log-probability of drawing `seq` (indices into `cands`)
    /// without replacement.
    pub fn seq_logp(w: &[f64], dim: usize, cands: &[Vec<f64>], x: &[f64], seq: &[usize]) -> f64 {
        let e: Vec<f64> = cands.iter().map(|c| score(w, dim, c, x)).collect();
        let mut remaining: Vec<usize> = (0..cands.len()).collect();
        let mut total = 0.0;
        for &a in seq {
            let z: f64 = remaining.iter().map(|&j| e[j].exp()).sum();
            total += e[a] - z.ln();
            remaining.retain(|&j| j != a);
        }
        total
    }

    /// Probability of every ordered pair `(a, b)`, `a != b`.
    pub fn pair_probs(w: &[f64], dim: usize, cands: &[Vec<f64>], x: &[f64]) -> Vec<((usize, usize), f64)> {
        let n = cands.len();
        let mut out = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    out.push(((a, b), seq_logp(w, dim, cands, x, &[a, b]).exp()));
                }
            }
        }
        out
    }
}

pub fn random_tokens<R: Rng>(rng: &mut R, vocab: &[&str], max_len: usize) -> Vec<String> {
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| vocab.choose(rng).unwrap().to_string()).collect()
}

pub fn random_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-3 {
            return v;
        }
    }
}

pub fn case(id: &str, context: &[&str], incomplete: &str, rewrite: &str) -> DialogueCase {
    DialogueCase {
        id: id.into(),
        context: context.iter().map(|s| s.to_string()).collect(),
        incomplete: incomplete.into(),
        rewrite: Some(rewrite.into()),
        omission_type: None,
        annotations: None,
    }
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}
