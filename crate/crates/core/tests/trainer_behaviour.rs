use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use demoselect::evaluate::RewardEnv;
use demoselect::generator::{sim_generate, GenRequest, GenResponse, Generator, SimGenerator};
use demoselect::policy::{grad_logp, sample_demonstration, sequence_log_probs, DemonstrationState};
use demoselect::prompt::PromptTemplate;
use demoselect::rng::substream;
use demoselect::trainer::{
    accumulate_gradient, compute_baseline, fit, train_epoch, BaselineCache, RewardMetric, RewardRecord, TrainConfig,
    TrainerState,
};
use demoselect::{score_pair, synth_corpus, CorpusSplit, EmbeddingTable, TokenizeMode};
use rand::seq::SliceRandom;

// Measured on synth_corpus(0, 200, 200, 100) with the simulated backend
// (noise seed 0) before the trainer was written.
const MEAN_TRAIN_BASELINE: f64 = 0.844404;
const MATCHED_MINUS_UNMATCHED: f64 = 0.211801;

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

/// Always answers with the same text, so reward equals baseline.
struct Constant;

impl Generator for Constant {
    fn complete(&self, _req: &GenRequest) -> demoselect::Result<GenResponse> {
        Ok(GenResponse {
            text: "where is it".into(),
            latency: Duration::ZERO,
            attempts: 1,
        })
    }
}

/// Returns the gold rewrite of the test case with one more trailing token
/// dropped each time the same test block is seen.
struct Degrading {
    gold: HashMap<String, String>,
    seen: Mutex<HashMap<String, usize>>,
}

impl Degrading {
    fn new(corpus: &CorpusSplit, template: &PromptTemplate) -> Self {
        let gold = corpus
            .all_cases()
            .map(|c| (template.test_block(c), c.rewrite.clone().unwrap()))
            .collect();
        Degrading {
            gold,
            seen: Mutex::default(),
        }
    }
}

impl Generator for Degrading {
    fn complete(&self, req: &GenRequest) -> demoselect::Result<GenResponse> {
        let block = req.prompt.rsplit("\n\n").next().unwrap().to_string();
        let gold = &self.gold[&block];
        let mut seen = self.seen.lock().unwrap();
        let n = seen.entry(block).or_default();
        *n += 1;
        let words: Vec<&str> = gold.split_whitespace().collect();
        let keep = words.len().saturating_sub(*n).max(1);
        Ok(GenResponse {
            text: words[..keep].join(" "),
            latency: Duration::ZERO,
            attempts: 1,
        })
    }
}

fn setup(seed: u64, c: usize, t: usize, d: usize) -> (CorpusSplit, EmbeddingTable, PromptTemplate) {
    let corpus = synth_corpus(seed, c, t, d);
    let table = EmbeddingTable::from_cases(corpus.all_cases(), 64, seed);
    (corpus, table, PromptTemplate::default())
}

#[test]
fn zero_advantages_leave_w_bitwise_unchanged() {
    let (corpus, table, template) = setup(1, 40, 24, 8);
    let env = RewardEnv::new(&corpus, &template, &Constant);
    let mut state = TrainerState::new(table.dim(), 1e-2);
    let before = state.params.clone();
    let cache = BaselineCache::default();
    let out = train_epoch(&mut state, &env, &table, &small_cfg(), 1, &cache).unwrap();
    assert!(out.batches.iter().flatten().all(|r| r.advantage == 0.0));
    assert_eq!(state.params.w, before.w);
    assert_eq!(state.step, 3);
}

#[test]
fn positive_advantage_raises_the_sampled_demonstration() {
    let (corpus, table, _) = setup(2, 30, 4, 4);
    let ids = corpus.candidate_ids();
    let case = &corpus.train[0];
    let mut state = TrainerState::new(table.dim(), 1e-2);
    let mut rng = substream(2, "sampling", &["test"]);
    let demo = sample_demonstration(&state.params, &table, &ids, &case.id, 5, &mut rng).unwrap();
    let record = RewardRecord {
        case_id: case.id.clone(),
        demo_ids: demo.selected.clone(),
        generated: String::new(),
        reward: 0.9,
        baseline: 0.6,
        advantage: 0.9 - 0.6,
        step_logps: demo.step_logps.clone(),
    };
    let grad = accumulate_gradient(&state.params, &table, &ids, &[record]).unwrap();
    state.optimizer.ascend(&mut state.params.w, &grad);
    let after = sequence_log_probs(&state.params, &table, &ids, &case.id, &demo.selected).unwrap();
    let before_total: f64 = demo.step_logps.iter().sum();
    let after_total: f64 = after.iter().sum();
    assert!(after_total > before_total, "{after_total} <= {before_total}");
}

#[test]
fn stored_advantages_and_gradients_match_recomputation() {
    let (corpus, table, template) = setup(3, 60, 32, 8);
    let sim = SimGenerator::new(&corpus, &template, 3);
    let env = RewardEnv::new(&corpus, &template, &sim);
    // One batch, so every record was sampled at the initial W.
    let cfg = TrainConfig {
        batch_size: 32,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut state = TrainerState::new(table.dim(), cfg.learning_rate);
    let snapshot = state.params.clone();
    let out = train_epoch(&mut state, &env, &table, &cfg, 1, &BaselineCache::default()).unwrap();
    let ids = corpus.candidate_ids();
    assert_eq!(out.batches.len(), 1);
    let mut recomputed = vec![0.0; table.dim() * table.dim()];
    let mut with_reward = vec![0.0; recomputed.len()];
    let mut baseline_part = vec![0.0; recomputed.len()];
    for r in &out.batches[0] {
        assert!((r.advantage - (r.reward - r.baseline)).abs() <= 1e-10);
        assert!((0.0..=1.0).contains(&r.reward) && (0.0..=1.0).contains(&r.baseline));
        let state = DemonstrationState {
            selected: r.demo_ids.clone(),
            step_logps: r.step_logps.clone(),
            total_logp: r.step_logps.iter().sum(),
        };
        let g = grad_logp(&snapshot, &table, &ids, &r.case_id, &state).unwrap();
        for i in 0..g.len() {
            recomputed[i] += r.advantage * g[i];
            with_reward[i] += r.reward * g[i];
            baseline_part[i] += r.baseline * g[i];
        }
    }
    for i in 0..recomputed.len() {
        assert!((out.gradients[0][i] - recomputed[i]).abs() <= 1e-10);
        assert!((with_reward[i] - baseline_part[i] - recomputed[i]).abs() <= 1e-10);
    }
}

#[test]
fn baseline_is_cached_and_m1_is_one_rollout() {
    let (corpus, _, template) = setup(4, 40, 8, 4);
    let sim = SimGenerator::new(&corpus, &template, 4);
    let env = RewardEnv::new(&corpus, &template, &sim);
    let case = &corpus.train[0];
    let cache = BaselineCache::default();
    let a = compute_baseline(&env, case, 5, 1, RewardMetric::RougeL, 9, &cache).unwrap();
    assert_eq!(cache.len(), 1);
    let b = compute_baseline(&env, case, 5, 1, RewardMetric::RougeL, 9, &cache).unwrap();
    assert_eq!(a, b);
    let mut rng = substream(9, "baseline", &[case.id.as_str()]);
    let demo = demoselect::baselines::select_random(&corpus.candidate_ids(), 5, &mut rng).unwrap();
    assert_eq!(a, env.rollout(case, &demo).unwrap().report.rouge_l);
}

#[test]
fn sim_reward_fixtures() {
    let (corpus, _, template) = setup(0, 200, 200, 100);
    let sim = SimGenerator::new(&corpus, &template, 0);
    let env = RewardEnv::new(&corpus, &template, &sim);
    let cache = BaselineCache::default();
    let mut total = 0.0;
    let (mut matched, mut unmatched) = (0.0, 0.0);
    for case in &corpus.train {
        total += compute_baseline(&env, case, 5, 3, RewardMetric::RougeL, 0, &cache).unwrap();
        let ty = case.omission_type.as_ref();
        let pick = |same: bool| -> Vec<String> {
            corpus
                .candidates
                .iter()
                .filter(|c| (c.omission_type.as_ref() == ty) == same)
                .take(5)
                .map(|c| c.id.clone())
                .collect()
        };
        let rl = |demo: Vec<String>| {
            let out = sim_generate(&corpus, &case.id, &demo, 0).unwrap();
            score_pair(&out, case.rewrite.as_deref().unwrap(), &case.incomplete, TokenizeMode::Word)
                .unwrap()
                .rouge_l
        };
        matched += rl(pick(true));
        unmatched += rl(pick(false));
    }
    let n = corpus.train.len() as f64;
    let mean = total / n;
    assert!((0.55..=0.9).contains(&mean));
    assert!((mean - MEAN_TRAIN_BASELINE).abs() < 1e-6, "{mean}");
    let gap = (matched - unmatched) / n;
    assert!(gap >= 0.15);
    assert!((gap - MATCHED_MINUS_UNMATCHED).abs() < 1e-6, "{gap}");
}

#[test]
fn untrained_advantage_is_centred_when_types_are_shuffled() {
    let (mut corpus, table, template) = setup(5, 200, 200, 20);
    let mut types: Vec<Option<String>> = corpus.candidates.iter().map(|c| c.omission_type.clone()).collect();
    types.shuffle(&mut substream(5, "test-shuffle", &["types"]));
    for (c, t) in corpus.candidates.iter_mut().zip(types) {
        c.omission_type = t;
    }
    let sim = SimGenerator::new(&corpus, &template, 5);
    let env = RewardEnv::new(&corpus, &template, &sim);
    let cfg = TrainConfig {
        seed: 5,
        ..TrainConfig::default()
    };
    let mut state = TrainerState::new(table.dim(), cfg.learning_rate);
    let out = train_epoch(&mut state, &env, &table, &cfg, 1, &BaselineCache::default()).unwrap();
    assert!(out.stats.mean_advantage.abs() <= 0.05, "{}", out.stats.mean_advantage);
}

#[test]
fn early_stopping_returns_the_first_epoch() {
    let (corpus, table, template) = setup(6, 40, 16, 8);
    let gen = Degrading::new(&corpus, &template);
    let env = RewardEnv::new(&corpus, &template, &gen);
    let cfg = TrainConfig {
        epochs: 10,
        early_stop_patience: 1,
        ..TrainConfig::default()
    };
    let result = fit(&env, &table, &cfg).unwrap();
    assert_eq!(result.history.len(), 2);
    assert!(result.history[1].dev_metric < result.history[0].dev_metric);
    assert_eq!(result.best.epoch, 1);
    assert_eq!(result.best_dev, result.history[0].dev_metric);
}

#[test]
fn fit_is_reproducible_and_independent_of_jobs() {
    let (corpus, table, template) = setup(7, 60, 32, 12);
    let sim = SimGenerator::new(&corpus, &template, 7);
    let env = RewardEnv::new(&corpus, &template, &sim);
    let cfg = TrainConfig {
        epochs: 3,
        seed: 7,
        ..TrainConfig::default()
    };
    let a = fit(&env, &table, &cfg).unwrap();
    let b = fit(&env, &table, &cfg).unwrap();
    let c = fit(&env, &table, &TrainConfig { jobs: 4, ..cfg }).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best, b.best);
    assert_eq!(a.history, c.history);
    assert_eq!(a.best, c.best);
}

#[test]
fn too_many_generator_failures_abort() {
    struct Failing;
    impl Generator for Failing {
        fn complete(&self, _req: &GenRequest) -> demoselect::Result<GenResponse> {
            Err(demoselect::Error::Timeout { attempts: 4 })
        }
    }
    let (corpus, table, template) = setup(8, 30, 16, 4);
    let env = RewardEnv::new(&corpus, &template, &Failing);
    let mut state = TrainerState::new(table.dim(), 1e-3);
    let err = train_epoch(&mut state, &env, &table, &small_cfg(), 1, &BaselineCache::default()).unwrap_err();
    assert!(matches!(err, demoselect::Error::TooManyFailures { .. }), "{err}");
}

#[test]
fn checkpoints_round_trip_exactly() {
    let (corpus, table, template) = setup(9, 40, 16, 8);
    let sim = SimGenerator::new(&corpus, &template, 9);
    let env = RewardEnv::new(&corpus, &template, &sim);
    let result = fit(&env, &table, &small_cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    result.best.save(&path).unwrap();
    let back = demoselect::trainer::Checkpoint::load(&path).unwrap();
    assert_eq!(back, result.best);
}
