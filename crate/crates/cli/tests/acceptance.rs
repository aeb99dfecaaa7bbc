//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Tolerances are fixed below.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{metric, policy as pl, rank};
use demoselect::baselines::{bm25_select, knn_select, Bm25Index, Bm25Params, TokenMap};
use demoselect::evaluate::{evaluate_selector, RewardEnv};
use demoselect::generator::SimGenerator;
use demoselect::metrics::{report_from_tokens, restoration_fscore, rouge_l};
use demoselect::policy::{grad_logp, sample_demonstration, PolicyParams};
use demoselect::prompt::{Order, PromptTemplate};
use demoselect::selection::Selector;
use demoselect::trainer::{fit, train_epoch, BaselineCache, TrainConfig, TrainerState};
use demoselect::{synth_corpus, DialogueCase, EmbeddingTable, TokenizeMode};
use demoselect_cli::run_args;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_TIME_LIMIT: Duration = Duration::from_secs(60);
const FREQ_TOL: f64 = 0.01;
const METRIC_TOL: f64 = 1e-9;
const BASELINE_TOL: f64 = 1e-10;
const MARGIN_OVER_RANDOM: f64 = 0.05;
const MARGIN_OVER_KNN: f64 = 0.01;
const CLOSED_LOOP_LIMIT: Duration = Duration::from_secs(300);
const ORDER_TOL: f64 = 1e-9;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Instance {
    params: PolicyParams,
    table: EmbeddingTable,
    ids: Vec<String>,
    vecs: Vec<Vec<f64>>,
    x: Vec<f64>,
}

fn instance(rng: &mut ChaCha8Rng, dim: usize, n: usize, w_scale: f64) -> Instance {
    let w: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-w_scale..w_scale)).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("c{i:02}")).collect();
    let vecs: Vec<Vec<f64>> = ids.iter().map(|_| common::random_vector(rng, dim)).collect();
    let x = common::random_vector(rng, dim);
    let mut table = EmbeddingTable::new(dim);
    for (id, v) in ids.iter().zip(&vecs) {
        table.insert(id, v.clone()).unwrap();
    }
    table.insert("test", x.clone()).unwrap();
    Instance {
        params: PolicyParams::from_rows(dim, w).unwrap(),
        table,
        ids,
        vecs,
        x,
    }
}

fn position(ids: &[String], id: &str) -> usize {
    ids.iter().position(|x| x == id).unwrap()
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (dim, n, k) = (16, 10, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let inst = instance(&mut rng, dim, n, 1.0);
        let state = sample_demonstration(&inst.params, &inst.table, &inst.ids, "test", k, &mut rng).map_err(err)?;
        let grad = grad_logp(&inst.params, &inst.table, &inst.ids, "test", &state).map_err(err)?;
        let seq: Vec<usize> = state.selected.iter().map(|id| position(&inst.ids, id)).collect();
        let mut w = inst.params.w.clone();
        let (mut diff, mut norm) = (0.0, 0.0);
        for i in 0..dim * dim {
            let orig = w[i];
            w[i] = orig + GRAD_STEP;
            let up = pl::seq_logp(&w, dim, &inst.vecs, &inst.x, &seq);
            w[i] = orig - GRAD_STEP;
            let down = pl::seq_logp(&w, dim, &inst.vecs, &inst.x, &seq);
            w[i] = orig;
            let fd = (up - down) / (2.0 * GRAD_STEP);
            diff += (fd - grad[i]).powi(2);
            norm += fd * fd;
        }
        worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-12));
    }
    let elapsed = start.elapsed();
    ensure(worst <= GRAD_REL_TOL, || format!("max relative error {worst:.2e}"))?;
    ensure(elapsed < GRAD_TIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!("20 instances, max relative error {worst:.2e}, {:.2}s", elapsed.as_secs_f64()))
}

fn sampling_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let inst = instance(&mut rng, 4, 4, 3.0);
    let want = pl::pair_probs(&inst.params.w, 4, &inst.vecs, &inst.x);
    let draws = 200_000;
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for _ in 0..draws {
        let s = sample_demonstration(&inst.params, &inst.table, &inst.ids, "test", 2, &mut rng).map_err(err)?;
        *counts
            .entry((position(&inst.ids, &s.selected[0]), position(&inst.ids, &s.selected[1])))
            .or_default() += 1;
    }
    ensure(want.len() == 12, || format!("{} ordered pairs enumerated", want.len()))?;
    let mut worst: f64 = 0.0;
    for (pair, p) in &want {
        let freq = counts.get(pair).copied().unwrap_or(0) as f64 / draws as f64;
        worst = worst.max((freq - p).abs());
    }
    ensure(worst <= FREQ_TOL, || format!("max deviation {worst:.4}"))?;
    Ok(format!("12 ordered pairs over {draws} draws, max deviation {worst:.4}"))
}

fn metric_equivalence() -> Check {
    const VOCAB: &[&str] = &["how", "about", "food", "in", "the", "price", "range", "cheap", "a", "b"];
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let hyp = common::random_tokens(&mut rng, VOCAB, 12);
        let mut reference = common::random_tokens(&mut rng, VOCAB, 12);
        if reference.is_empty() {
            reference.push("food".into());
        }
        let incomplete = common::random_tokens(&mut rng, VOCAB, 5);
        let got = report_from_tokens(&hyp, &reference, &incomplete).columns();
        let want = metric::columns(&hyp, &reference, &incomplete);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    ensure(worst <= METRIC_TOL, || format!("max deviation {worst:.2e}"))?;
    let w = common::words;
    let rl = rouge_l(
        &w("how about mediterranean food"),
        &w("how about mediterranean food in expensive price range"),
    );
    ensure((rl - 2.0 / 3.0).abs() < 1e-4, || format!("worked ROUGE-L {rl}"))?;
    let f1 = restoration_fscore(
        &w("how about mediterranean food in cheap price range"),
        &w("how about mediterranean food in expensive price range"),
        &w("how about mediterranean food"),
        1,
    );
    ensure((f1 - 0.75).abs() < 1e-12, || format!("worked restoration F1 {f1}"))?;
    Ok(format!("50 random pairs, max deviation {worst:.1e}; ROUGE-L {rl:.4}, F1 {f1:.2}"))
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    const VOCAB: &[&str] = &["food", "price", "range", "hotel", "room", "wifi", "cheap", "park", "the", "a"];
    let n = rng.random_range(1..6);
    (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn retrieval_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    for trial in 0..100 {
        let n = rng.random_range(3..25);
        let mut docs: Vec<DialogueCase> = (0..n)
            .map(|i| common::case(&format!("c{i:03}"), &[sentence(&mut rng).as_str()], &sentence(&mut rng), "x"))
            .collect();
        let last = docs[0].clone();
        docs[n - 1].context = last.context;
        docs[n - 1].incomplete = last.incomplete;
        let query = common::case("q", &[sentence(&mut rng).as_str()], &sentence(&mut rng), "x");
        let index = Bm25Index::build(&docs, Bm25Params::default(), TokenizeMode::Word, TokenMap::default()).map_err(err)?;
        let k = rng.random_range(1..=n);
        let got = bm25_select(&index, &query, k).map_err(err)?;
        let want = rank::top_k(rank::bm25_scores(&docs, &query, 1.5, 0.75), k);
        ensure(got == want, || format!("BM25 corpus {trial}: {got:?} vs {want:?}"))?;
    }
    for trial in 0..100 {
        let dim = rng.random_range(2..10);
        let n = rng.random_range(2..30);
        let mut table = EmbeddingTable::new(dim);
        let mut vecs: Vec<Vec<f64>> = Vec::new();
        for i in 0..n {
            let v = if i % 5 == 4 { vecs[i - 2].clone() } else { common::random_vector(&mut rng, dim) };
            table.insert(&format!("c{i:03}"), v.clone()).map_err(err)?;
            vecs.push(v);
        }
        let x = common::random_vector(&mut rng, dim);
        table.insert("q", x.clone()).map_err(err)?;
        let ids: Vec<String> = (0..n).map(|i| format!("c{i:03}")).collect();
        let k = rng.random_range(1..=n);
        let got = knn_select(&table, &ids, "q", k).map_err(err)?;
        let want = rank::top_k(ids.iter().zip(&vecs).map(|(id, v)| (id.clone(), rank::cosine(v, &x))).collect(), k);
        ensure(got == want, || format!("kNN corpus {trial}: {got:?} vs {want:?}"))?;
    }
    Ok("100 BM25 corpora and 100 kNN corpora, rankings identical (ties by id)".into())
}

fn baseline_identity() -> Check {
    let corpus = synth_corpus(5, 60, 40, 8);
    let table = EmbeddingTable::from_cases(corpus.all_cases(), 64, 5);
    let template = PromptTemplate::default();
    let sim = SimGenerator::new(&corpus, &template, 5);
    let env = RewardEnv::new(&corpus, &template, &sim);
    let cfg = TrainConfig {
        seed: 5,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let mut state = TrainerState::new(table.dim(), cfg.learning_rate);
    let mut replay = state.clone();
    let out = train_epoch(&mut state, &env, &table, &cfg, 1, &BaselineCache::default()).map_err(err)?;
    let ids = corpus.candidate_ids();
    let mut worst: f64 = 0.0;
    let mut records = 0;
    for (batch, grad) in out.batches.iter().zip(&out.gradients) {
        let mut sum = vec![0.0; grad.len()];
        for r in batch {
            records += 1;
            worst = worst.max((r.advantage - (r.reward - r.baseline)).abs());
            let s = demoselect::policy::DemonstrationState {
                selected: r.demo_ids.clone(),
                step_logps: r.step_logps.clone(),
                total_logp: r.step_logps.iter().sum(),
            };
            let g = grad_logp(&replay.params, &table, &ids, &r.case_id, &s).map_err(err)?;
            for (acc, gi) in sum.iter_mut().zip(&g) {
                *acc += r.advantage * gi;
            }
        }
        for (a, b) in sum.iter().zip(grad) {
            worst = worst.max((a - b).abs());
        }
        replay.optimizer.ascend(&mut replay.params.w, grad);
    }
    ensure(replay.params == state.params, || "replayed optimizer diverged".into())?;
    ensure(worst <= BASELINE_TOL, || format!("max deviation {worst:.2e}"))?;
    Ok(format!("{records} records in {} batches, max deviation {worst:.1e}", out.batches.len()))
}

struct ClosedLoop {
    corpus: demoselect::CorpusSplit,
    table: EmbeddingTable,
    policy: PolicyParams,
}

fn closed_loop(saved: &mut Option<ClosedLoop>) -> Check {
    let start = Instant::now();
    let corpus = synth_corpus(0, 200, 200, 100);
    let table = EmbeddingTable::from_cases(corpus.all_cases(), 256, 0);
    let template = PromptTemplate::default();
    let sim = SimGenerator::new(&corpus, &template, 0);
    let env = RewardEnv::new(&corpus, &template, &sim);
    let cfg = TrainConfig {
        shots: 5,
        epochs: 30,
        seed: 0,
        jobs: 1,
        ..TrainConfig::default()
    };
    let result = fit(&env, &table, &cfg).map_err(err)?;
    let policy = result.best.params().map_err(err)?;
    let dev_rl = |sel: &Selector| -> Result<f64, String> {
        Ok(evaluate_selector(&env, sel, &corpus.dev, Some(&table), 5, 1).map_err(err)?.mean.rouge_l)
    };
    let ours = dev_rl(&Selector::Policy(policy.clone()))?;
    let random = dev_rl(&Selector::Random { seed: 0 })?;
    let knn = dev_rl(&Selector::Knn)?;
    let elapsed = start.elapsed();
    let summary = format!(
        "Ours {ours:.4} vs Random {random:.4} (+{:.4}) vs kNN {knn:.4} (+{:.4}), best epoch {} of {}, {:.1}s",
        ours - random,
        ours - knn,
        result.best.epoch,
        result.history.len(),
        elapsed.as_secs_f64()
    );
    *saved = Some(ClosedLoop { corpus: corpus.clone(), table, policy });
    ensure(ours - random >= MARGIN_OVER_RANDOM, || summary.clone())?;
    ensure(ours - knn >= MARGIN_OVER_KNN, || summary.clone())?;
    ensure(elapsed <= CLOSED_LOOP_LIMIT, || summary.clone())?;
    Ok(summary)
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for name in names {
        let x = std::fs::read(a.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let y = std::fs::read(b.join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    Ok(())
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();
    let data = root.join("data");
    let s = |p: &Path| p.to_string_lossy().into_owned();
    run_args(["demoselect", "synth", "--seed", "0", "--candidates", "120", "--train", "80", "--dev", "40", "--out", &s(&data)])
        .map_err(err)?;
    let train_files = ["checkpoint.json", "history.jsonl", "manifest.json", "table.txt"];
    let eval_files = ["evaluation.json", "selections.jsonl", "manifest.json", "table.txt"];
    for run in ["a", "b"] {
        let out = root.join(format!("train-{run}"));
        run_args([
            "demoselect", "train", "--corpus", &s(&data), "--hash-dim", "64", "--epochs", "4", "--jobs", "4",
            "--out", &s(&out),
        ])
        .map_err(err)?;
        let ck = root.join("train-a").join("checkpoint.json");
        run_args([
            "demoselect", "evaluate", "--corpus", &s(&data), "--hash-dim", "64", "--selector", "policy",
            "--checkpoint", &s(&ck), "--jobs", "4", "--out", &s(&root.join(format!("eval-{run}"))),
        ])
        .map_err(err)?;
    }
    same_files(&root.join("train-a"), &root.join("train-b"), &train_files)?;
    same_files(&root.join("eval-a"), &root.join("eval-b"), &eval_files)?;
    Ok("train (checkpoint, history, manifest) and evaluate outputs byte-identical across two runs".into())
}

fn order_robustness(saved: &Option<ClosedLoop>) -> Check {
    let Some(run) = saved else {
        return Err("closed-loop run did not produce a policy".into());
    };
    let mut values = Vec::new();
    for order in [Order::Sampling, Order::Reverse] {
        let template = PromptTemplate::default().with_order(order);
        let sim = SimGenerator::new(&run.corpus, &template, 0);
        let env = RewardEnv::new(&run.corpus, &template, &sim);
        let eval = evaluate_selector(&env, &Selector::Policy(run.policy.clone()), &run.corpus.dev, Some(&run.table), 5, 4)
            .map_err(err)?;
        values.push(eval.mean.rouge_l);
    }
    let diff = (values[0] - values[1]).abs();
    ensure(diff < ORDER_TOL, || format!("sampling {} vs reverse {}", values[0], values[1]))?;
    Ok(format!("dev ROUGE-L {:.6} in both orders, difference {diff:.1e}", values[0]))
}

fn main() {
    let mut saved = None;
    let checks: Vec<(&str, Box<dyn FnOnce() -> Check + '_>)> = vec![
        ("gradient correctness", Box::new(gradient_correctness)),
        ("sampling correctness", Box::new(sampling_correctness)),
        ("metric oracle equivalence", Box::new(metric_equivalence)),
        ("BM25/kNN oracle equivalence", Box::new(retrieval_equivalence)),
        ("baseline-subtraction identity", Box::new(baseline_identity)),
        ("closed-loop learning", Box::new(|| closed_loop(&mut saved))),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    let mut report = |name: &str, result: Check| match result {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(detail) => {
            failed += 1;
            println!("FAIL  {name}: {detail}");
        }
    };
    for (name, check) in checks {
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        report(name, result);
    }
    report("order robustness", order_robustness(&saved));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 8 acceptance criteria passed");
}
