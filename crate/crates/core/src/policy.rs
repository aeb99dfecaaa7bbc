//! Bilinear cosine scoring policy over candidate examples.
//!
//! For candidate vector `s` and test vector `x` the score is
//! `|sᵀ W x| / (‖s‖ ‖x‖)`. A demonstration is drawn by sequential softmax
//! sampling without replacement: after each pick the softmax is renormalized
//! over the candidates that remain.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};

/// Row-major `dim × dim` bilinear matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub dim: usize,
    pub w: Vec<f64>,
}

impl PolicyParams {
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        PolicyParams { dim, w }
    }

    pub fn from_rows(dim: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != dim * dim {
            return Err(Error::DimMismatch {
                expected: dim * dim,
                got: w.len(),
            });
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("policy matrix has non-finite entries".into()));
        }
        Ok(PolicyParams { dim, w })
    }

    /// `W x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .chunks_exact(self.dim)
            .map(|row| dot(row, x))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationState {
    pub selected: Vec<String>,
    pub step_logps: Vec<f64>,
    pub total_logp: f64,
}

impl DemonstrationState {
    fn new() -> Self {
        DemonstrationState {
            selected: Vec::new(),
            step_logps: Vec::new(),
            total_logp: 0.0,
        }
    }

    fn push(&mut self, id: String, logp: f64) {
        self.selected.push(id);
        self.step_logps.push(logp);
        self.total_logp = self.step_logps.iter().sum();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_vector(v: &[f64], dim: usize) -> Result<f64> {
    if v.len() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: v.len(),
        });
    }
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::InvalidArgument("zero-norm or non-finite vector".into()));
    }
    Ok(n)
}

pub fn score(params: &PolicyParams, cand: &[f64], test: &[f64]) -> Result<f64> {
    let nc = check_vector(cand, params.dim)?;
    let nt = check_vector(test, params.dim)?;
    Ok(dot(cand, &params.apply(test)).abs() / (nc * nt))
}

/// Numerically stable softmax.
pub fn softmax_over(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("softmax over an empty list".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("softmax over non-finite scores".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

fn log_softmax_at(scores: &[f64], live: &[bool], at: usize) -> f64 {
    let max = scores
        .iter()
        .zip(live)
        .filter(|(_, &l)| l)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores
        .iter()
        .zip(live)
        .filter(|(_, &l)| l)
        .map(|(s, _)| (s - max).exp())
        .sum();
    scores[at] - max - z.ln()
}

/// Per-candidate quantities shared by scoring, sampling and the gradient.
struct Scored<'a> {
    ids: &'a [String],
    /// Raw bilinear form `sᵀ W x`.
    raw: Vec<f64>,
    /// `1 / (‖s‖ ‖x‖)`.
    inv_norm: Vec<f64>,
    scores: Vec<f64>,
}

fn score_candidates<'a>(
    params: &PolicyParams,
    table: &EmbeddingTable,
    candidates: &'a [String],
    test_id: &str,
) -> Result<Scored<'a>> {
    if table.dim() != params.dim {
        return Err(Error::DimMismatch {
            expected: params.dim,
            got: table.dim(),
        });
    }
    let x = table.vector(test_id)?;
    let nx = check_vector(x, params.dim)?;
    let wx = params.apply(x);
    let n = candidates.len();
    let mut raw = Vec::with_capacity(n);
    let mut inv_norm = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for id in candidates {
        let s = table.vector(id)?;
        let ns = check_vector(s, params.dim)?;
        let r = dot(s, &wx);
        let inv = 1.0 / (ns * nx);
        raw.push(r);
        inv_norm.push(inv);
        scores.push(r.abs() * inv);
    }
    Ok(Scored {
        ids: candidates,
        raw,
        inv_norm,
        scores,
    })
}

fn check_request(candidates: &[String], test_id: &str, k: usize) -> Result<()> {
    if k > candidates.len() {
        return Err(Error::TooFewCandidates {
            k,
            available: candidates.len(),
        });
    }
    if candidates.iter().any(|c| c == test_id) {
        return Err(Error::InvalidArgument(format!(
            "test case {test_id:?} is in the candidate pool"
        )));
    }
    let unique: HashSet<&String> = candidates.iter().collect();
    if unique.len() != candidates.len() {
        return Err(Error::InvalidArgument("candidate ids are not distinct".into()));
    }
    Ok(())
}

/// Scores of every candidate against `test_id`, in candidate order.
pub fn candidate_scores(
    params: &PolicyParams,
    table: &EmbeddingTable,
    candidates: &[String],
    test_id: &str,
) -> Result<Vec<f64>> {
    Ok(score_candidates(params, table, candidates, test_id)?.scores)
}

/// Draws `k` distinct candidates by sequential renormalized softmax sampling.
pub fn sample_demonstration<R: Rng + ?Sized>(
    params: &PolicyParams,
    table: &EmbeddingTable,
    candidates: &[String],
    test_id: &str,
    k: usize,
    rng: &mut R,
) -> Result<DemonstrationState> {
    check_request(candidates, test_id, k)?;
    let scored = score_candidates(params, table, candidates, test_id)?;
    let mut live = vec![true; candidates.len()];
    let mut state = DemonstrationState::new();
    for _ in 0..k {
        let max = scored
            .scores
            .iter()
            .zip(&live)
            .filter(|(_, &l)| l)
            .map(|(s, _)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scored
            .scores
            .iter()
            .zip(&live)
            .map(|(s, &l)| if l { (s - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = weights.iter().sum();
        let u: f64 = rng.random::<f64>() * z;
        let mut acc = 0.0;
        let mut chosen = None;
        for (j, w) in weights.iter().enumerate() {
            if !live[j] {
                continue;
            }
            acc += w;
            chosen = Some(j);
            if u < acc {
                break;
            }
        }
        let j = chosen.expect("at least one live candidate");
        let logp = log_softmax_at(&scored.scores, &live, j);
        live[j] = false;
        state.push(scored.ids[j].clone(), logp);
    }
    Ok(state)
}

/// Greedy decoding: the highest-scoring remaining candidate at every step,
/// ties broken by the lexicographically smallest id.
pub fn argmax_demonstration(
    params: &PolicyParams,
    table: &EmbeddingTable,
    candidates: &[String],
    test_id: &str,
    k: usize,
) -> Result<DemonstrationState> {
    check_request(candidates, test_id, k)?;
    let scored = score_candidates(params, table, candidates, test_id)?;
    let mut live = vec![true; candidates.len()];
    let mut state = DemonstrationState::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for j in (0..candidates.len()).filter(|&j| live[j]) {
            best = match best {
                None => Some(j),
                Some(b) => {
                    let (sj, sb) = (scored.scores[j], scored.scores[b]);
                    if sj > sb || (sj == sb && scored.ids[j] < scored.ids[b]) {
                        Some(j)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        let j = best.expect("k <= number of candidates");
        let logp = log_softmax_at(&scored.scores, &live, j);
        live[j] = false;
        state.push(scored.ids[j].clone(), logp);
    }
    Ok(state)
}

fn positions(candidates: &[String], selected: &[String]) -> Result<Vec<usize>> {
    let mut seen = HashSet::new();
    selected
        .iter()
        .map(|id| {
            if !seen.insert(id) {
                return Err(Error::InconsistentState(format!("{id:?} selected twice")));
            }
            candidates
                .iter()
                .position(|c| c == id)
                .ok_or_else(|| Error::InconsistentState(format!("{id:?} is not a candidate")))
        })
        .collect()
}

/// Per-step log-probabilities of drawing `selected` in order under `params`.
pub fn sequence_log_probs(
    params: &PolicyParams,
    table: &EmbeddingTable,
    candidates: &[String],
    test_id: &str,
    selected: &[String],
) -> Result<Vec<f64>> {
    let pos = positions(candidates, selected)?;
    let scored = score_candidates(params, table, candidates, test_id)?;
    let mut live = vec![true; candidates.len()];
    Ok(pos
        .into_iter()
        .map(|j| {
            let lp = log_softmax_at(&scored.scores, &live, j);
            live[j] = false;
            lp
        })
        .collect())
}

/// Gradient of `Σ_t log p(a_t | s_t)` with respect to `W`, row-major.
///
/// With `c_j = sign(s_jᵀ W x) / (‖s_j‖ ‖x‖)` every score derivative is
/// `c_j s_j xᵀ`, so the whole gradient is the outer product
/// `(Σ_t [c_a s_a − Σ_j p_j c_j s_j]) xᵀ`. `sign(0)` is taken as 0.
pub fn grad_logp(
    params: &PolicyParams,
    table: &EmbeddingTable,
    candidates: &[String],
    test_id: &str,
    state: &DemonstrationState,
) -> Result<Vec<f64>> {
    if state.step_logps.len() != state.selected.len() {
        return Err(Error::InconsistentState(
            "step log-probabilities and selections differ in length".into(),
        ));
    }
    let pos = positions(candidates, &state.selected)?;
    let scored = score_candidates(params, table, candidates, test_id)?;
    let dim = params.dim;
    let coef: Vec<f64> = scored
        .raw
        .iter()
        .zip(&scored.inv_norm)
        .map(|(r, inv)| sign(*r) * inv)
        .collect();

    let mut live = vec![true; candidates.len()];
    let mut v = vec![0.0; dim];
    for (step, &a) in pos.iter().enumerate() {
        let lp = log_softmax_at(&scored.scores, &live, a);
        let recorded = state.step_logps[step];
        if (lp - recorded).abs() > 1e-9 * (1.0 + lp.abs()) {
            return Err(Error::InconsistentState(format!(
                "step {step}: recorded log-probability {recorded} but policy gives {lp}"
            )));
        }
        let max = scored
            .scores
            .iter()
            .zip(&live)
            .filter(|(_, &l)| l)
            .map(|(s, _)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scored
            .scores
            .iter()
            .zip(&live)
            .filter(|(_, &l)| l)
            .map(|(s, _)| (s - max).exp())
            .sum();
        let sa = table.vector(&candidates[a])?;
        for (vi, si) in v.iter_mut().zip(sa) {
            *vi += coef[a] * si;
        }
        for j in (0..candidates.len()).filter(|&j| live[j]) {
            let p = (scored.scores[j] - max).exp() / z;
            let w = p * coef[j];
            if w == 0.0 {
                continue;
            }
            let sj = table.vector(&candidates[j])?;
            for (vi, si) in v.iter_mut().zip(sj) {
                *vi -= w * si;
            }
        }
        live[a] = false;
    }

    let x = table.vector(test_id)?;
    let mut grad = vec![0.0; dim * dim];
    for (row, vi) in grad.chunks_exact_mut(dim).zip(&v) {
        for (g, xj) in row.iter_mut().zip(x) {
            *g = vi * xj;
        }
    }
    Ok(grad)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
