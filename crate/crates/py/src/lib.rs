//! Python bindings: corpora, embeddings, the selection policy, selectors,
//! metrics and offline training against the simulated generator.

use std::collections::HashSet;
use std::path::PathBuf;

use demoselect::corpus::{load_corpus, save_corpus, synth_corpus_with_test};
use demoselect::encoder::{hash_text, load_vectors, save_vectors};
use demoselect::evaluate::{evaluate_selector, RewardEnv};
use demoselect::generator::SimGenerator;
use demoselect::policy::{argmax_demonstration, grad_logp, sample_demonstration, sequence_log_probs, DemonstrationState};
use demoselect::prompt::{Order, PromptTemplate};
use demoselect::rng::substream;
use demoselect::selection::Selector;
use demoselect::trainer::{fit, Checkpoint, TrainConfig};
use demoselect::{CorpusSplit, DialogueCase, MetricReport, SplitRole, TokenizeMode};
use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: demoselect::Error) -> PyErr {
    match e {
        demoselect::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        demoselect::Error::UnknownCase(_) | demoselect::Error::MissingEmbedding(_) => PyKeyError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<TokenizeMode> {
    match mode {
        "word" => Ok(TokenizeMode::Word),
        "char" => Ok(TokenizeMode::Char),
        _ => Err(PyValueError::new_err(format!("unknown tokenize mode {mode:?}"))),
    }
}

fn report_dict<'py>(py: Python<'py>, r: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (name, v) in MetricReport::COLUMN_NAMES.iter().zip(r.columns()) {
        d.set_item(*name, v)?;
    }
    Ok(d)
}

fn case_dict<'py>(py: Python<'py>, c: &DialogueCase) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("id", &c.id)?;
    d.set_item("context", &c.context)?;
    d.set_item("incomplete", &c.incomplete)?;
    d.set_item("rewrite", &c.rewrite)?;
    d.set_item("omission_type", &c.omission_type)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (text, mode = "word"))]
fn tokenize(text: &str, mode: &str) -> PyResult<Vec<String>> {
    Ok(demoselect::tokenize(text, parse_mode(mode)?))
}

/// All metrics of one hypothesis as a dict keyed RL, R1, R2, B1..B4, F1..F3.
#[pyfunction]
#[pyo3(signature = (hyp, reference, incomplete, mode = "word"))]
fn score_pair<'py>(py: Python<'py>, hyp: &str, reference: &str, incomplete: &str, mode: &str) -> PyResult<Bound<'py, PyDict>> {
    let r = demoselect::score_pair(hyp, reference, incomplete, parse_mode(mode)?).map_err(to_py)?;
    report_dict(py, &r)
}

#[pyfunction]
#[pyo3(name = "hash_text", signature = (text, dim = 256, seed = 0))]
fn py_hash_text(text: &str, dim: usize, seed: u64) -> PyResult<Vec<f64>> {
    if dim < 16 {
        return Err(PyValueError::new_err("dim must be >= 16"));
    }
    Ok(hash_text(text, dim, seed))
}

/// Candidate / train / dev / test splits.
#[pyclass(name = "Corpus", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCorpus {
    inner: CorpusSplit,
}

impl PyCorpus {
    fn split(&self, name: &str) -> PyResult<&[DialogueCase]> {
        Ok(match name {
            "candidates" => &self.inner.candidates,
            "train" => &self.inner.train,
            "dev" => &self.inner.dev,
            "test" => &self.inner.test,
            _ => return Err(PyValueError::new_err(format!("unknown split {name:?}"))),
        })
    }
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    #[pyo3(signature = (seed = 0, candidates = 200, train = 200, dev = 100, test = 0))]
    fn synth(seed: u64, candidates: usize, train: usize, dev: usize, test: usize) -> Self {
        PyCorpus {
            inner: synth_corpus_with_test(seed, candidates, train, dev, test),
        }
    }

    /// Reads `<directory>/{candidates,train,dev}.jsonl` and, if present,
    /// `test.jsonl`.
    #[staticmethod]
    fn load(directory: PathBuf) -> PyResult<Self> {
        let read = |name: &str, role| load_corpus(&directory.join(format!("{name}.jsonl")), role).map_err(to_py);
        let test_path = directory.join("test.jsonl");
        let inner = CorpusSplit {
            candidates: read("candidates", SplitRole::Candidates)?,
            train: read("train", SplitRole::Train)?,
            dev: read("dev", SplitRole::Dev)?,
            test: if test_path.exists() {
                read("test", SplitRole::Test)?
            } else {
                Vec::new()
            },
        };
        inner.check_disjoint().map_err(to_py)?;
        Ok(PyCorpus { inner })
    }

    fn save(&self, directory: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&directory).map_err(|e| PyIOError::new_err(e.to_string()))?;
        for name in ["candidates", "train", "dev", "test"] {
            let cases = self.split(name)?;
            if !cases.is_empty() {
                save_corpus(&directory.join(format!("{name}.jsonl")), cases).map_err(to_py)?;
            }
        }
        Ok(())
    }

    fn ids(&self, split: &str) -> PyResult<Vec<String>> {
        Ok(self.split(split)?.iter().map(|c| c.id.clone()).collect())
    }

    fn case<'py>(&self, py: Python<'py>, id: &str) -> PyResult<Bound<'py, PyDict>> {
        let case = self
            .inner
            .all_cases()
            .find(|c| c.id == id)
            .ok_or_else(|| PyKeyError::new_err(id.to_string()))?;
        case_dict(py, case)
    }

    fn __len__(&self) -> usize {
        self.inner.all_cases().count()
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus(candidates={}, train={}, dev={}, test={})",
            self.inner.candidates.len(),
            self.inner.train.len(),
            self.inner.dev.len(),
            self.inner.test.len()
        )
    }
}

/// Per-case sentence vectors.
#[pyclass(name = "Embeddings", frozen)]
struct PyEmbeddings {
    inner: demoselect::EmbeddingTable,
}

#[pymethods]
impl PyEmbeddings {
    #[staticmethod]
    #[pyo3(signature = (corpus, dim = 256, seed = 0))]
    fn hashed(corpus: &PyCorpus, dim: usize, seed: u64) -> PyResult<Self> {
        if dim < 16 {
            return Err(PyValueError::new_err("dim must be >= 16"));
        }
        Ok(PyEmbeddings {
            inner: demoselect::EmbeddingTable::from_cases(corpus.inner.all_cases(), dim, seed),
        })
    }

    /// Loads a vectors file, requiring a vector for every case of `corpus`.
    #[staticmethod]
    fn load(path: PathBuf, corpus: &PyCorpus) -> PyResult<Self> {
        let expected: HashSet<String> = corpus.inner.all_cases().map(|c| c.id.clone()).collect();
        let (inner, _) = load_vectors(&path, &expected).map_err(to_py)?;
        Ok(PyEmbeddings { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_vectors(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn vector(&self, id: &str) -> PyResult<Vec<f64>> {
        self.inner.vector(id).map(<[f64]>::to_vec).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Bilinear cosine selection policy.
#[pyclass(name = "Policy", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: demoselect::policy::PolicyParams,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn identity(dim: usize) -> Self {
        PyPolicy {
            inner: demoselect::policy::PolicyParams::identity(dim),
        }
    }

    /// Row-major `dim × dim` matrix.
    #[staticmethod]
    fn from_rows(dim: usize, w: Vec<f64>) -> PyResult<Self> {
        Ok(PyPolicy {
            inner: demoselect::policy::PolicyParams::from_rows(dim, w).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load_checkpoint(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        Ok(PyPolicy {
            inner: ck.params().map_err(to_py)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn w(&self) -> Vec<f64> {
        self.inner.w.clone()
    }

    fn score(&self, candidate: Vec<f64>, test: Vec<f64>) -> PyResult<f64> {
        demoselect::policy::score(&self.inner, &candidate, &test).map_err(to_py)
    }

    /// Draws `k` candidates without replacement; returns `(ids, step_logps)`.
    #[pyo3(signature = (embeddings, candidates, test_id, k, seed = 0))]
    fn sample(
        &self,
        embeddings: &PyEmbeddings,
        candidates: Vec<String>,
        test_id: &str,
        k: usize,
        seed: u64,
    ) -> PyResult<(Vec<String>, Vec<f64>)> {
        let mut rng = substream(seed, "sampling", &[test_id]);
        let s = sample_demonstration(&self.inner, &embeddings.inner, &candidates, test_id, k, &mut rng).map_err(to_py)?;
        Ok((s.selected, s.step_logps))
    }

    fn greedy(&self, embeddings: &PyEmbeddings, candidates: Vec<String>, test_id: &str, k: usize) -> PyResult<Vec<String>> {
        Ok(argmax_demonstration(&self.inner, &embeddings.inner, &candidates, test_id, k)
            .map_err(to_py)?
            .selected)
    }

    fn log_probs(&self, embeddings: &PyEmbeddings, candidates: Vec<String>, test_id: &str, selected: Vec<String>) -> PyResult<Vec<f64>> {
        sequence_log_probs(&self.inner, &embeddings.inner, &candidates, test_id, &selected).map_err(to_py)
    }

    /// Gradient of the demonstration's total log-probability with respect
    /// to the row-major matrix.
    fn grad_logp(&self, embeddings: &PyEmbeddings, candidates: Vec<String>, test_id: &str, selected: Vec<String>) -> PyResult<Vec<f64>> {
        let step_logps = sequence_log_probs(&self.inner, &embeddings.inner, &candidates, test_id, &selected).map_err(to_py)?;
        let state = DemonstrationState {
            total_logp: step_logps.iter().sum(),
            selected,
            step_logps,
        };
        grad_logp(&self.inner, &embeddings.inner, &candidates, test_id, &state).map_err(to_py)
    }
}

fn build_selector(name: &str, corpus: &CorpusSplit, seed: u64, policy: Option<&PyPolicy>) -> PyResult<Selector> {
    Ok(match name {
        "random" => Selector::Random { seed },
        "bm25" => Selector::Bm25(Box::new(
            demoselect::baselines::Bm25Index::build(
                &corpus.candidates,
                Default::default(),
                TokenizeMode::Word,
                Default::default(),
            )
            .map_err(to_py)?,
        )),
        "knn" => Selector::Knn,
        "policy" => Selector::Policy(
            policy
                .ok_or_else(|| PyValueError::new_err("the policy selector needs policy="))?
                .inner
                .clone(),
        ),
        other => Selector::Complexity(other.parse().map_err(to_py)?),
    })
}

/// Demonstration ids chosen by `selector` for every case of `split`.
#[pyfunction]
#[pyo3(signature = (corpus, embeddings, selector, split = "dev", k = 5, seed = 0, policy = None))]
fn select(
    corpus: &PyCorpus,
    embeddings: &PyEmbeddings,
    selector: &str,
    split: &str,
    k: usize,
    seed: u64,
    policy: Option<PyRef<'_, PyPolicy>>,
) -> PyResult<Vec<(String, Vec<String>)>> {
    let sel = build_selector(selector, &corpus.inner, seed, policy.as_deref())?;
    let ids = corpus.inner.candidate_ids();
    corpus
        .split(split)?
        .iter()
        .map(|c| {
            let demo = sel
                .select(c, &corpus.inner.candidates, &ids, Some(&embeddings.inner), k)
                .map_err(to_py)?;
            Ok((c.id.clone(), demo))
        })
        .collect()
}

/// Mean metrics of `selector` on `split` with the simulated generator.
#[pyfunction]
#[pyo3(signature = (corpus, embeddings, selector, split = "dev", k = 5, seed = 0, policy = None, order = "sampling", jobs = 1))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    corpus: &PyCorpus,
    embeddings: &PyEmbeddings,
    selector: &str,
    split: &str,
    k: usize,
    seed: u64,
    policy: Option<PyRef<'_, PyPolicy>>,
    order: &str,
    jobs: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let order: Order = order.parse().map_err(to_py)?;
    let template = PromptTemplate::default().with_order(order);
    let sel = build_selector(selector, &corpus.inner, seed, policy.as_deref())?;
    let sim = SimGenerator::new(&corpus.inner, &template, seed);
    let env = RewardEnv::new(&corpus.inner, &template, &sim);
    let cases = corpus.split(split)?;
    let eval = py
        .detach(|| evaluate_selector(&env, &sel, cases, Some(&embeddings.inner), k, jobs))
        .map_err(to_py)?;
    report_dict(py, &eval.mean)
}

/// Trains against the simulated generator; returns `(policy, history)`.
#[pyfunction]
#[pyo3(signature = (corpus, embeddings, epochs = 30, learning_rate = 1e-3, shots = 5, batch_size = 8, baseline_samples = 3, early_stop_patience = 5, seed = 0, jobs = 1))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    corpus: &PyCorpus,
    embeddings: &PyEmbeddings,
    epochs: usize,
    learning_rate: f64,
    shots: usize,
    batch_size: usize,
    baseline_samples: usize,
    early_stop_patience: usize,
    seed: u64,
    jobs: usize,
) -> PyResult<(PyPolicy, Vec<Bound<'py, PyDict>>)> {
    let cfg = TrainConfig {
        shots,
        epochs,
        batch_size,
        learning_rate,
        baseline_samples,
        seed,
        early_stop_patience,
        jobs,
        ..TrainConfig::default()
    };
    let template = PromptTemplate::default();
    let sim = SimGenerator::new(&corpus.inner, &template, seed);
    let env = RewardEnv::new(&corpus.inner, &template, &sim);
    let result = py.detach(|| fit(&env, &embeddings.inner, &cfg)).map_err(to_py)?;
    let history = result
        .history
        .iter()
        .map(|h| {
            let d = PyDict::new(py);
            d.set_item("epoch", h.epoch)?;
            d.set_item("train_reward", h.train_reward)?;
            d.set_item("dev_metric", h.dev_metric)?;
            d.set_item("grad_norm", h.grad_norm)?;
            d.set_item("mean_advantage", h.mean_advantage)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((
        PyPolicy {
            inner: result.best.params().map_err(to_py)?,
        },
        history,
    ))
}

#[pymodule]
fn demoselect_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(score_pair, m)?)?;
    m.add_function(wrap_pyfunction!(py_hash_text, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyEmbeddings>()?;
    m.add_class::<PyPolicy>()?;
    Ok(())
}
