//! REINFORCE training of the bilinear policy.
//!
//! For every training case a demonstration is sampled from the current
//! policy, the final demonstration is sent to the generator once, and the
//! reward minus a cached random-selection baseline weights the gradient of
//! the demonstration's total log-probability. One optimizer step is applied
//! per batch; the best dev checkpoint is kept and training stops once dev
//! stops improving.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::select_random;
use crate::corpus::DialogueCase;
use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::evaluate::{par_map, RewardEnv};
use crate::metrics::MetricReport;
use crate::policy::{argmax_demonstration, grad_logp, sample_demonstration, PolicyParams};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RewardMetric {
    #[default]
    #[serde(rename = "rougeL")]
    RougeL,
    #[serde(rename = "rouge1")]
    Rouge1,
    #[serde(rename = "bleu4")]
    Bleu4,
    #[serde(rename = "f1")]
    F1,
}

impl RewardMetric {
    pub fn value(self, report: &MetricReport) -> f64 {
        match self {
            RewardMetric::RougeL => report.rouge_l,
            RewardMetric::Rouge1 => report.rouge1,
            RewardMetric::Bleu4 => report.bleu[3],
            RewardMetric::F1 => report.fscore[0],
        }
    }
}

impl std::str::FromStr for RewardMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rougeL" | "rougel" => Ok(RewardMetric::RougeL),
            "rouge1" => Ok(RewardMetric::Rouge1),
            "bleu4" => Ok(RewardMetric::Bleu4),
            "f1" => Ok(RewardMetric::F1),
            _ => Err(Error::InvalidArgument(format!("unknown reward metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub shots: usize,
    pub reward_metric: RewardMetric,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub baseline_samples: usize,
    pub seed: u64,
    pub early_stop_patience: usize,
    /// Concurrent rollouts per batch.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            shots: 5,
            reward_metric: RewardMetric::RougeL,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            baseline_samples: 3,
            seed: 0,
            early_stop_patience: 5,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("shots", self.shots),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("baseline_samples", self.baseline_samples),
            ("early_stop_patience", self.early_stop_patience),
            ("jobs", self.jobs),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction, ascending the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let step = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            params[i] += self.learning_rate * step;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub dim: usize,
    pub w: Vec<f64>,
    pub optimizer: Adam,
    pub step: u64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn params(&self) -> Result<PolicyParams> {
        PolicyParams::from_rows(self.dim, self.w.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        ck.params()?;
        Ok(ck)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub case_id: String,
    pub demo_ids: Vec<String>,
    pub generated: String,
    pub reward: f64,
    pub baseline: f64,
    pub advantage: f64,
    /// Per-step log-probabilities of the sampled demonstration.
    pub step_logps: Vec<f64>,
}

/// Per-run cache of random-selection baselines keyed by `(case id, seed)`.
#[derive(Debug, Default)]
pub struct BaselineCache(Mutex<HashMap<(String, u64), f64>>);

impl BaselineCache {
    pub fn get(&self, case_id: &str, seed: u64) -> Option<f64> {
        self.0
            .lock()
            .expect("baseline cache poisoned")
            .get(&(case_id.to_string(), seed))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("baseline cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean reward of `m` uniformly random `k`-demonstrations for one case,
/// drawn from the `baseline` substream and cached for the run.
pub fn compute_baseline(
    env: &RewardEnv<'_>,
    case: &DialogueCase,
    k: usize,
    m: usize,
    metric: RewardMetric,
    seed: u64,
    cache: &BaselineCache,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidArgument("baseline_samples must be >= 1".into()));
    }
    if let Some(v) = cache.get(&case.id, seed) {
        return Ok(v);
    }
    let candidate_ids = env.corpus.candidate_ids();
    let mut rng = substream(seed, "baseline", &[case.id.as_str()]);
    let mut total = 0.0;
    for _ in 0..m {
        let demo = select_random(&candidate_ids, k, &mut rng)?;
        total += metric.value(&env.rollout(case, &demo)?.report);
    }
    let value = total / m as f64;
    cache
        .0
        .lock()
        .expect("baseline cache poisoned")
        .insert((case.id.clone(), seed), value);
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_advantage: f64,
    /// Mean Frobenius norm of the per-batch gradients.
    pub grad_norm: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct EpochOutcome {
    pub stats: EpochStats,
    /// Records grouped by optimizer batch, in processing order.
    pub batches: Vec<Vec<RewardRecord>>,
    /// Accumulated `Σ advantage · ∇ log p` per batch, before the step.
    pub gradients: Vec<Vec<f64>>,
}

/// Mutable training state: policy, optimizer and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: PolicyParams,
    pub optimizer: Adam,
    pub step: u64,
}

impl TrainerState {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        TrainerState {
            params: PolicyParams::identity(dim),
            optimizer: Adam::new(dim * dim, learning_rate),
            step: 0,
        }
    }

    pub fn checkpoint(&self, epoch: usize) -> Checkpoint {
        Checkpoint {
            dim: self.params.dim,
            w: self.params.w.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            epoch,
        }
    }
}

/// `Σ advantage · ∇ log p(demonstration)` over `records`, all evaluated at
/// `params`.
pub fn accumulate_gradient(
    params: &PolicyParams,
    table: &EmbeddingTable,
    candidate_ids: &[String],
    records: &[RewardRecord],
) -> Result<Vec<f64>> {
    let mut total = vec![0.0; params.dim * params.dim];
    for rec in records {
        if rec.advantage == 0.0 {
            continue;
        }
        let state = crate::policy::DemonstrationState {
            selected: rec.demo_ids.clone(),
            step_logps: rec.step_logps.clone(),
            total_logp: rec.step_logps.iter().sum(),
        };
        let g = grad_logp(params, table, candidate_ids, &rec.case_id, &state)?;
        for (t, gi) in total.iter_mut().zip(&g) {
            *t += rec.advantage * gi;
        }
    }
    Ok(total)
}

/// One pass over the training split.
pub fn train_epoch(
    state: &mut TrainerState,
    env: &RewardEnv<'_>,
    table: &EmbeddingTable,
    cfg: &TrainConfig,
    epoch: usize,
    cache: &BaselineCache,
) -> Result<EpochOutcome> {
    cfg.validate()?;
    let train = &env.corpus.train;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let candidate_ids = env.corpus.candidate_ids();
    let epoch_tag = epoch.to_string();
    let mut order: Vec<&DialogueCase> = train.iter().collect();
    order.shuffle(&mut substream(cfg.seed, "shuffle", &[epoch_tag.as_str()]));

    let mut batches = Vec::new();
    let mut gradients = Vec::new();
    let (mut reward_sum, mut adv_sum, mut norm_sum, mut n_records) = (0.0, 0.0, 0.0, 0usize);
    let mut skipped = 0usize;
    for batch in order.chunks(cfg.batch_size) {
        let snapshot = &state.params;
        let outcomes = par_map(cfg.jobs, batch, |case| -> Result<Option<RewardRecord>> {
            let mut rng = substream(cfg.seed, "sampling", &[epoch_tag.as_str(), case.id.as_str()]);
            let demo = sample_demonstration(snapshot, table, &candidate_ids, &case.id, cfg.shots, &mut rng)?;
            let result = match env.rollout(case, &demo.selected) {
                Ok(r) => r,
                Err(e) if is_generator_failure(&e) => {
                    log::warn!("case {}: {e}; skipped", case.id);
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let baseline = match compute_baseline(
                env,
                case,
                cfg.shots,
                cfg.baseline_samples,
                cfg.reward_metric,
                cfg.seed,
                cache,
            ) {
                Ok(b) => b,
                Err(e) if is_generator_failure(&e) => {
                    log::warn!("case {} baseline: {e}; skipped", case.id);
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let reward = cfg.reward_metric.value(&result.report);
            Ok(Some(RewardRecord {
                case_id: case.id.clone(),
                demo_ids: demo.selected,
                generated: result.generated,
                reward,
                baseline,
                advantage: reward - baseline,
                step_logps: demo.step_logps,
            }))
        })?;
        let mut records = Vec::with_capacity(batch.len());
        for o in outcomes {
            match o? {
                Some(r) => records.push(r),
                None => skipped += 1,
            }
        }
        if skipped * 10 > train.len() {
            return Err(Error::TooManyFailures {
                skipped,
                total: train.len(),
            });
        }
        let grad = accumulate_gradient(snapshot, table, &candidate_ids, &records)?;
        norm_sum += grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        state.optimizer.ascend(&mut state.params.w, &grad);
        state.step += 1;
        for r in &records {
            reward_sum += r.reward;
            adv_sum += r.advantage;
        }
        n_records += records.len();
        batches.push(records);
        gradients.push(grad);
    }
    let n = n_records.max(1) as f64;
    Ok(EpochOutcome {
        stats: EpochStats {
            epoch,
            mean_reward: reward_sum / n,
            mean_advantage: adv_sum / n,
            grad_norm: norm_sum / batches.len().max(1) as f64,
            skipped,
        },
        batches,
        gradients,
    })
}

fn is_generator_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::Timeout { .. } | Error::Transport { .. } | Error::EmptyCompletion
    )
}

/// Mean reward metric on `cases` under greedy decoding of `params`.
pub fn dev_metric(
    params: &PolicyParams,
    env: &RewardEnv<'_>,
    table: &EmbeddingTable,
    cases: &[DialogueCase],
    k: usize,
    metric: RewardMetric,
    jobs: usize,
) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("dev split is empty".into()));
    }
    let candidate_ids = env.corpus.candidate_ids();
    let values = par_map(jobs, cases, |case| -> Result<f64> {
        let demo = argmax_demonstration(params, table, &candidate_ids, &case.id, k)?;
        Ok(metric.value(&env.rollout(case, &demo.selected)?.report))
    })?;
    let values = values.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub train_reward: f64,
    pub dev_metric: f64,
    pub grad_norm: f64,
    pub mean_advantage: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: Checkpoint,
    pub best_dev: f64,
    pub history: Vec<HistoryRecord>,
}

/// Trains from the identity matrix until `epochs` or early stopping and
/// returns the best-dev checkpoint.
pub fn fit(env: &RewardEnv<'_>, table: &EmbeddingTable, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    let corpus = env.corpus;
    corpus.check_disjoint()?;
    if corpus.dev.is_empty() {
        return Err(Error::InvalidArgument("dev split is empty".into()));
    }
    table.require(corpus.all_cases().map(|c| c.id.as_str()))?;
    let mut state = TrainerState::new(table.dim(), cfg.learning_rate);
    let cache = BaselineCache::default();
    let mut history = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let outcome = train_epoch(&mut state, env, table, cfg, epoch, &cache)?;
        let dev = dev_metric(&state.params, env, table, &corpus.dev, cfg.shots, cfg.reward_metric, cfg.jobs)?;
        log::info!(
            "epoch {epoch}: train reward {:.4}, advantage {:+.4}, dev {:.4}",
            outcome.stats.mean_reward,
            outcome.stats.mean_advantage,
            dev
        );
        history.push(HistoryRecord {
            epoch,
            train_reward: outcome.stats.mean_reward,
            dev_metric: dev,
            grad_norm: outcome.stats.grad_norm,
            mean_advantage: outcome.stats.mean_advantage,
        });
        if best.as_ref().is_none_or(|(b, _)| dev > *b) {
            best = Some((dev, state.checkpoint(epoch)));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    let (best_dev, best) = best.expect("at least one epoch");
    Ok(FitResult { best, best_dev, history })
}
