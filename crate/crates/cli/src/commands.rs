//! Subcommand implementations.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Args;
use demoselect::analysis::{complexity_of_selection, format_complexity, sweep, sweep_table, ComplexityMetric, SweepAxis};
use demoselect::baselines::{Bm25Index, Bm25Params, TokenMap};
use demoselect::corpus::{apply_annotations, load_corpus, save_corpus, synth_corpus_with_test};
use demoselect::encoder::{load_vectors, EmbeddingTable};
use demoselect::evaluate::{evaluate_selector, format_table, par_map, DecodeParams, Evaluation, RewardEnv};
use demoselect::generator::{Generator, HttpGenerator, SimGenerator};
use demoselect::io::write_jsonl;
use demoselect::prompt::PromptTemplate;
use demoselect::rng::sha256_hex;
use demoselect::selection::{load_selections, SelectionRecord, Selector};
use demoselect::trainer::{fit, Checkpoint};
use demoselect::{CorpusSplit, DialogueCase, MetricReport, SplitRole};
use serde::Serialize;

use crate::config::{parse_complexity, Backend, CommonArgs, RunConfig, TrainArgs};
use crate::CliError;

#[derive(Debug, Clone, Args)]
pub struct SynthCmd {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub candidates: usize,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub dev: usize,
    #[arg(long, default_value_t = 0)]
    pub test: usize,
    /// Output directory for candidates/train/dev[/test].jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Output directory for the checkpoint, history and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint path (default `<out>/checkpoint.json`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    #[default]
    Dev,
    Test,
}

impl EvalSplit {
    fn name(self) -> &'static str {
        match self {
            EvalSplit::Dev => "dev",
            EvalSplit::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    /// random | bm25 | knn | policy | file:<path> | length | pos | chunk
    #[arg(long)]
    pub selector: String,
    /// Trained checkpoint, required by the policy selector.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalSplit::Dev)]
    pub split: EvalSplit,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated selectors, at least two.
    #[arg(long, value_delimiter = ',', required = true)]
    pub selectors: Vec<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalSplit::Dev)]
    pub split: EvalSplit,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// shots | candidates | train_size
    #[arg(long, value_parser = parse_axis)]
    pub axis: SweepAxis,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',', default_value = "random,knn")]
    pub selectors: Vec<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalSplit::Dev)]
    pub split: EvalSplit,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    s.parse().map_err(|e: demoselect::Error| e.to_string())
}

/// A selector named on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectorSpec {
    Random,
    Bm25,
    Knn,
    Policy,
    File(PathBuf),
    Complexity(ComplexityMetric),
}

impl std::str::FromStr for SelectorSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        if let Some(path) = s.strip_prefix("file:") {
            if path.is_empty() {
                return Err(CliError::usage("selector", "file: selector needs a path"));
            }
            return Ok(SelectorSpec::File(PathBuf::from(path)));
        }
        match s {
            "random" => Ok(SelectorSpec::Random),
            "bm25" => Ok(SelectorSpec::Bm25),
            "knn" => Ok(SelectorSpec::Knn),
            "policy" => Ok(SelectorSpec::Policy),
            other => parse_complexity(other)
                .map(SelectorSpec::Complexity)
                .map_err(|_| CliError::usage("selector", format!("unknown selector {other:?}"))),
        }
    }
}

impl SelectorSpec {
    /// Row label used in tables.
    pub fn label(&self) -> String {
        match self {
            SelectorSpec::Random => "Random".into(),
            SelectorSpec::Bm25 => "BM25".into(),
            SelectorSpec::Knn => "KATE".into(),
            SelectorSpec::Policy => "Ours".into(),
            SelectorSpec::File(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "file".into()),
            SelectorSpec::Complexity(ComplexityMetric::Length) => "Length".into(),
            SelectorSpec::Complexity(ComplexityMetric::Pos) => "POS".into(),
            SelectorSpec::Complexity(ComplexityMetric::Chunk) => "Chunk".into(),
        }
    }

    fn build(&self, run: &Loaded, checkpoint: Option<&Path>) -> Result<Selector, CliError> {
        Ok(match self {
            SelectorSpec::Random => Selector::Random { seed: run.cfg.seed },
            SelectorSpec::Bm25 => {
                let map = match &run.cfg.stem_map {
                    Some(p) => TokenMap::from_file(p)?,
                    None => TokenMap::default(),
                };
                Selector::Bm25(Box::new(Bm25Index::build(
                    &run.corpus.candidates,
                    Bm25Params::default(),
                    run.cfg.tokenize,
                    map,
                )?))
            }
            SelectorSpec::Knn => Selector::Knn,
            SelectorSpec::Policy => {
                let path =
                    checkpoint.ok_or_else(|| CliError::usage("selector", "policy selector requires --checkpoint"))?;
                let params = Checkpoint::load(path)?.params()?;
                if params.dim != run.table.dim() {
                    return Err(demoselect::Error::DimMismatch {
                        expected: run.table.dim(),
                        got: params.dim,
                    }
                    .into());
                }
                Selector::Policy(params)
            }
            SelectorSpec::File(p) => Selector::File(load_selections(p)?),
            SelectorSpec::Complexity(m) => Selector::Complexity(*m),
        })
    }
}

fn parse_selectors(specs: &[String]) -> Result<Vec<SelectorSpec>, CliError> {
    specs.iter().map(|s| s.trim().parse()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Inputs of one run, loaded and hashed.
pub struct Loaded {
    pub cfg: RunConfig,
    pub corpus: CorpusSplit,
    pub table: EmbeddingTable,
    pub template: PromptTemplate,
    pub inputs: BTreeMap<String, InputFile>,
}

fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| demoselect::Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl Loaded {
    /// Loads the named splits plus embeddings and template.
    pub fn new(cfg: RunConfig, splits: &[&str]) -> Result<Self, CliError> {
        let mut inputs = BTreeMap::new();
        let mut corpus = CorpusSplit::default();
        for &split in splits {
            let path = cfg
                .corpus
                .resolve(split)
                .ok_or_else(|| CliError::usage("config", format!("no path for the {split} split (use --{split} or --corpus)")))?;
            let sha256 = hash_file(&path)?;
            let role = match split {
                "candidates" => SplitRole::Candidates,
                "train" => SplitRole::Train,
                "dev" => SplitRole::Dev,
                _ => SplitRole::Test,
            };
            let cases = load_corpus(&path, role)?;
            match split {
                "candidates" => corpus.candidates = cases,
                "train" => corpus.train = cases,
                "dev" => corpus.dev = cases,
                _ => corpus.test = cases,
            }
            inputs.insert(split.to_string(), InputFile { path, sha256 });
        }
        corpus.check_disjoint()?;
        if let Some(path) = &cfg.corpus.annotations {
            let sha256 = hash_file(path)?;
            let mut unknown: Option<HashSet<String>> = None;
            for cases in [&mut corpus.candidates, &mut corpus.train, &mut corpus.dev, &mut corpus.test] {
                let report = apply_annotations(cases, path)?;
                let ids: HashSet<String> = report.unknown_ids.into_iter().collect();
                unknown = Some(match unknown {
                    None => ids,
                    Some(prev) => prev.intersection(&ids).cloned().collect(),
                });
            }
            let unknown = unknown.unwrap_or_default();
            if !unknown.is_empty() {
                log::warn!("{}: {} annotation(s) for unknown ids skipped", path.display(), unknown.len());
            }
            inputs.insert("annotations".into(), InputFile { path: path.clone(), sha256 });
        }
        let table = match (&cfg.vectors, cfg.hash_dim) {
            (Some(path), _) => {
                let sha256 = hash_file(path)?;
                let expected: HashSet<String> = corpus.all_cases().map(|c| c.id.clone()).collect();
                let (table, _) = load_vectors(path, &expected)?;
                inputs.insert("vectors".into(), InputFile { path: path.clone(), sha256 });
                table
            }
            (None, Some(dim)) => EmbeddingTable::from_cases(corpus.all_cases(), dim, cfg.hash_seed),
            (None, None) => unreachable!("RunConfig::finish picks an embedding source"),
        };
        let template = match &cfg.template {
            Some(path) => {
                inputs.insert(
                    "template".into(),
                    InputFile {
                        path: path.clone(),
                        sha256: hash_file(path)?,
                    },
                );
                PromptTemplate::from_file(path)?
            }
            None => PromptTemplate::default(),
        }
        .with_order(cfg.order);
        if let Some(path) = &cfg.stem_map {
            inputs.insert(
                "stem_map".into(),
                InputFile {
                    path: path.clone(),
                    sha256: hash_file(path)?,
                },
            );
        }
        Ok(Loaded {
            cfg,
            corpus,
            table,
            template,
            inputs,
        })
    }

    pub fn generator(&self) -> Box<dyn Generator> {
        match self.cfg.backend {
            Backend::Sim => Box::new(SimGenerator::new(&self.corpus, &self.template, self.cfg.seed)),
            Backend::Http => Box::new(HttpGenerator::new(
                self.cfg.generator_url.clone().expect("validated"),
                self.cfg.max_in_flight,
            )),
        }
    }

    pub fn env<'a>(&'a self, generator: &'a dyn Generator) -> RewardEnv<'a> {
        RewardEnv::new(&self.corpus, &self.template, generator)
            .with_mode(self.cfg.tokenize)
            .with_decode(self.decode())
    }

    fn decode(&self) -> DecodeParams {
        DecodeParams {
            max_new_tokens: self.cfg.max_new_tokens,
            temperature: self.cfg.temperature,
            timeout: Duration::from_secs_f64(self.cfg.timeout_secs),
        }
    }

    fn split(&self, split: EvalSplit) -> &[DialogueCase] {
        match split {
            EvalSplit::Dev => &self.corpus.dev,
            EvalSplit::Test => &self.corpus.test,
        }
    }

    fn write_manifest(&self, out: &Path, command: &str, extra: BTreeMap<&str, serde_json::Value>) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            command: &'a str,
            seed: u64,
            config: &'a RunConfig,
            inputs: &'a BTreeMap<String, InputFile>,
            #[serde(flatten)]
            extra: BTreeMap<&'a str, serde_json::Value>,
        }
        let manifest = Manifest {
            command,
            seed: self.cfg.seed,
            config: &self.cfg,
            inputs: &self.inputs,
            extra,
        };
        write_json(&out.join("manifest.json"), &manifest)
    }
}

fn create_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::runtime("io", format!("{}: {e}", out.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime("format", e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))
}

fn output_err(e: demoselect::Error) -> CliError {
    match e {
        demoselect::Error::Io { .. } => CliError::runtime("io", e.to_string()),
        other => other.into(),
    }
}

pub fn cmd_synth(cmd: &SynthCmd) -> Result<String, CliError> {
    if cmd.candidates == 0 || cmd.train == 0 || cmd.dev == 0 {
        return Err(CliError::usage("invalid_argument", "split sizes must be >= 1"));
    }
    let split = synth_corpus_with_test(cmd.seed, cmd.candidates, cmd.train, cmd.dev, cmd.test);
    create_dir(&cmd.out)?;
    let mut text = String::new();
    for (name, cases) in [
        ("candidates", &split.candidates),
        ("train", &split.train),
        ("dev", &split.dev),
        ("test", &split.test),
    ] {
        if cases.is_empty() {
            continue;
        }
        let path = cmd.out.join(format!("{name}.jsonl"));
        save_corpus(&path, cases).map_err(output_err)?;
        let _ = writeln!(text, "{name}\t{}\t{}\t{}", cases.len(), hash_file(&path)?, path.display());
    }
    Ok(text)
}

pub fn cmd_train(cmd: &TrainCmd) -> Result<String, CliError> {
    let cfg = cmd.common.resolve(Some(&cmd.train))?;
    let run = Loaded::new(cfg, &["candidates", "train", "dev"])?;
    let generator = run.generator();
    let env = run.env(generator.as_ref());
    let result = fit(&env, &run.table, &run.cfg.training)?;

    create_dir(&cmd.out)?;
    let ck_path = cmd.checkpoint.clone().unwrap_or_else(|| cmd.out.join("checkpoint.json"));
    result.best.save(&ck_path).map_err(output_err)?;
    write_jsonl(&cmd.out.join("history.jsonl"), &result.history).map_err(output_err)?;

    let eval = evaluate_selector(
        &env,
        &Selector::Policy(result.best.params()?),
        &run.corpus.dev,
        Some(&run.table),
        run.cfg.training.shots,
        run.cfg.training.jobs,
    )?;
    let mut extra = BTreeMap::new();
    extra.insert("checkpoint_sha256", hash_file(&ck_path)?.into());
    extra.insert("best_epoch", result.best.epoch.into());
    run.write_manifest(&cmd.out, "train", extra)?;

    let mut text = String::new();
    for h in &result.history {
        let _ = writeln!(
            text,
            "epoch {:>3}  train {:.4}  dev {:.4}  |grad| {:.4}",
            h.epoch, h.train_reward, h.dev_metric, h.grad_norm
        );
    }
    let _ = writeln!(text, "best epoch {} (dev {:.4})", result.best.epoch, result.best_dev);
    text.push_str(&format_table(&[("Ours".into(), eval.mean)]));
    write_text(&cmd.out.join("table.txt"), &text)?;
    Ok(text)
}

struct Row {
    label: String,
    eval: Evaluation,
}

fn evaluate_specs(run: &Loaded, specs: &[SelectorSpec], checkpoint: Option<&Path>, split: EvalSplit) -> Result<Vec<Row>, CliError> {
    let cases = run.split(split);
    if cases.is_empty() {
        return Err(CliError::usage("config", format!("the {} split is empty", split.name())));
    }
    let generator = run.generator();
    let env = run.env(generator.as_ref());
    specs
        .iter()
        .map(|spec| {
            let selector = spec.build(run, checkpoint)?;
            let eval = evaluate_selector(
                &env,
                &selector,
                cases,
                Some(&run.table),
                run.cfg.training.shots,
                run.cfg.training.jobs,
            )?;
            Ok(Row {
                label: spec.label(),
                eval,
            })
        })
        .collect()
}

fn eval_splits(split: EvalSplit) -> [&'static str; 2] {
    ["candidates", split.name()]
}

fn rows_table(rows: &[Row]) -> String {
    let table: Vec<(String, MetricReport)> = rows.iter().map(|r| (r.label.clone(), r.eval.mean)).collect();
    format_table(&table)
}

fn selector_extra(specs: &[String], checkpoint: Option<&Path>, split: EvalSplit) -> Result<BTreeMap<&'static str, serde_json::Value>, CliError> {
    let mut extra = BTreeMap::new();
    extra.insert("selectors", serde_json::json!(specs));
    extra.insert("split", split.name().into());
    if let Some(p) = checkpoint {
        extra.insert("checkpoint", serde_json::json!({ "path": p, "sha256": hash_file(p)? }));
    }
    Ok(extra)
}

pub fn cmd_evaluate(cmd: &EvaluateCmd) -> Result<String, CliError> {
    let spec: SelectorSpec = cmd.selector.parse()?;
    let cfg = cmd.common.resolve(None)?;
    let run = Loaded::new(cfg, &eval_splits(cmd.split))?;
    let rows = evaluate_specs(&run, std::slice::from_ref(&spec), cmd.checkpoint.as_deref(), cmd.split)?;
    let text = rows_table(&rows);
    if let Some(out) = &cmd.out {
        create_dir(out)?;
        let eval = &rows[0].eval;
        write_json(&out.join("evaluation.json"), eval)?;
        let selections: Vec<SelectionRecord> = eval
            .cases
            .iter()
            .map(|c| SelectionRecord {
                test_id: c.test_id.clone(),
                demo_ids: c.demo_ids.clone(),
            })
            .collect();
        write_jsonl(&out.join("selections.jsonl"), &selections).map_err(output_err)?;
        write_text(&out.join("table.txt"), &text)?;
        let extra = selector_extra(std::slice::from_ref(&cmd.selector), cmd.checkpoint.as_deref(), cmd.split)?;
        run.write_manifest(out, "evaluate", extra)?;
    }
    Ok(text)
}

pub fn cmd_compare(cmd: &CompareCmd) -> Result<String, CliError> {
    let specs = parse_selectors(&cmd.selectors)?;
    if specs.len() < 2 {
        return Err(CliError::usage("selector", "compare needs at least two selectors"));
    }
    let cfg = cmd.common.resolve(None)?;
    let run = Loaded::new(cfg, &eval_splits(cmd.split))?;
    let rows = evaluate_specs(&run, &specs, cmd.checkpoint.as_deref(), cmd.split)?;
    let text = rows_table(&rows);
    if let Some(out) = &cmd.out {
        create_dir(out)?;
        let summary: Vec<serde_json::Value> = rows
            .iter()
            .map(|r| serde_json::json!({ "label": r.label, "mean": r.eval.mean }))
            .collect();
        write_json(&out.join("compare.json"), &summary)?;
        write_text(&out.join("table.txt"), &text)?;
        run.write_manifest(out, "compare", selector_extra(&cmd.selectors, cmd.checkpoint.as_deref(), cmd.split)?)?;
    }
    Ok(text)
}

pub fn cmd_sweep(cmd: &SweepCmd) -> Result<String, CliError> {
    if cmd.values.is_empty() {
        return Err(CliError::usage("invalid_argument", "sweep needs at least one value"));
    }
    let cfg = cmd.common.resolve(Some(&cmd.train))?;
    let run = Loaded::new(cfg, &["candidates", "train", "dev"])?;
    let generator = run.generator();
    let rows = sweep(
        cmd.axis,
        &cmd.values,
        &run.corpus,
        &run.table,
        &run.template,
        generator.as_ref(),
        &run.cfg.training,
        run.cfg.tokenize,
    )?;
    let text = format_table(&sweep_table(&rows));
    if let Some(out) = &cmd.out {
        create_dir(out)?;
        write_jsonl(&out.join("sweep.jsonl"), &rows).map_err(output_err)?;
        write_text(&out.join("table.txt"), &text)?;
        let mut extra = BTreeMap::new();
        extra.insert("axis", serde_json::to_value(cmd.axis).expect("enum serializes"));
        extra.insert("values", serde_json::json!(cmd.values));
        run.write_manifest(out, "sweep", extra)?;
    }
    Ok(text)
}

pub fn cmd_analyze(cmd: &AnalyzeCmd) -> Result<String, CliError> {
    let specs = parse_selectors(&cmd.selectors)?;
    let cfg = cmd.common.resolve(None)?;
    let run = Loaded::new(cfg, &eval_splits(cmd.split))?;
    let cases = run.split(cmd.split);
    if cases.is_empty() {
        return Err(CliError::usage("config", format!("the {} split is empty", cmd.split.name())));
    }
    let candidate_ids = run.corpus.candidate_ids();
    let mut rows = Vec::with_capacity(specs.len());
    for spec in &specs {
        let selector = spec.build(&run, cmd.checkpoint.as_deref())?;
        let selections = par_map(run.cfg.training.jobs, cases, |test| {
            selector
                .select(
                    test,
                    &run.corpus.candidates,
                    &candidate_ids,
                    Some(&run.table),
                    run.cfg.training.shots,
                )
                .map(|ids| (test.id.clone(), ids))
        })?
        .into_iter()
        .collect::<demoselect::Result<Vec<_>>>()?;
        rows.push((spec.label(), complexity_of_selection(&run.corpus, &selections, run.cfg.tokenize)?));
    }
    let text = format_complexity(&rows);
    if let Some(out) = &cmd.out {
        create_dir(out)?;
        let summary: Vec<serde_json::Value> = rows
            .iter()
            .map(|(label, stats)| serde_json::json!({ "label": label, "stats": stats }))
            .collect();
        write_json(&out.join("analysis.json"), &summary)?;
        write_text(&out.join("table.txt"), &text)?;
        run.write_manifest(out, "analyze", selector_extra(&cmd.selectors, cmd.checkpoint.as_deref(), cmd.split)?)?;
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_specs() {
        assert_eq!("knn".parse::<SelectorSpec>().unwrap(), SelectorSpec::Knn);
        assert_eq!(
            "file:sel/x.jsonl".parse::<SelectorSpec>().unwrap(),
            SelectorSpec::File("sel/x.jsonl".into())
        );
        assert_eq!(
            "pos".parse::<SelectorSpec>().unwrap(),
            SelectorSpec::Complexity(ComplexityMetric::Pos)
        );
        assert_eq!("file:sel/x.jsonl".parse::<SelectorSpec>().unwrap().label(), "x");
        let err = "nearest".parse::<SelectorSpec>().unwrap_err();
        assert_eq!(err.code, 2);
        assert!("file:".parse::<SelectorSpec>().is_err());
    }

    #[test]
    fn error_lines_are_single_line_json() {
        let e: CliError = demoselect::Error::Transport {
            attempts: 4,
            message: "connection\nrefused".into(),
        }
        .into();
        assert_eq!(e.code, 1);
        let line = e.to_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["kind"], "transport");
    }
}
