//! Generation backends: a deterministic simulated rewriter and an HTTP
//! client for hosted models.

use std::collections::HashMap;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, CorpusSplit, DialogueCase, TokenizeMode};
use crate::error::{Error, Result};
use crate::prompt::PromptTemplate;
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq)]
pub struct GenRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
    /// 0 requests deterministic decoding.
    pub temperature: f64,
    pub timeout: Duration,
}

impl GenRequest {
    pub fn new(prompt: String) -> Self {
        GenRequest {
            prompt,
            max_new_tokens: 64,
            temperature: 0.0,
            timeout: Duration::from_secs(60),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::InvalidArgument("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenResponse {
    pub text: String,
    pub latency: Duration,
    pub attempts: u32,
}

pub trait Generator: Send + Sync {
    fn complete(&self, req: &GenRequest) -> Result<GenResponse>;
}

/// Keeps the first nonempty line of a completion and strips an echoed
/// rewrite label from its start.
pub fn clean_completion(text: &str, rewrite_label: &str) -> String {
    let line = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let line = line
        .strip_prefix(rewrite_label)
        .or_else(|| line.strip_prefix("Rewrite:"))
        .unwrap_or(line);
    line.trim().to_string()
}

/// Validates the request, queries the backend and cleans the completion.
pub fn generate(backend: &dyn Generator, req: &GenRequest) -> Result<GenResponse> {
    req.validate()?;
    let mut resp = backend.complete(req)?;
    resp.text = clean_completion(&resp.text, "Rewrite:");
    if resp.text.is_empty() {
        return Err(Error::EmptyCompletion);
    }
    Ok(resp)
}

/// Largest corruption rate, reached when no demonstration shares the test
/// case's omission type.
pub const SIM_MAX_CORRUPTION: f64 = 0.6;

/// Simulated rewrite of `test_id` given the demonstration `demo_ids`.
///
/// With `m` demonstrations sharing the test case's omission type out of
/// `k`, every restored gold token is dropped independently with probability
/// `0.6 · (1 − m/k)`. The noise stream is keyed by the seed, the test id and
/// the sorted demonstration ids, so the output ignores demonstration order.
/// When nothing is dropped the gold rewrite is returned verbatim; otherwise
/// the surviving word tokens are joined by spaces.
pub fn sim_generate(corpus: &CorpusSplit, test_id: &str, demo_ids: &[String], noise_seed: u64) -> Result<String> {
    let index = corpus.index();
    let lookup = |id: &str| index.get(id).copied().ok_or_else(|| Error::UnknownCase(id.to_string()));
    let test = lookup(test_id)?;
    let demos: Vec<&DialogueCase> = demo_ids.iter().map(|id| lookup(id)).collect::<Result<_>>()?;
    sim_generate_cases(test, &demos, noise_seed)
}

fn omission_of(case: &DialogueCase) -> Result<&str> {
    case.omission_type.as_deref().ok_or_else(|| Error::MissingField {
        id: case.id.clone(),
        field: "omission_type",
    })
}

pub fn sim_generate_cases(test: &DialogueCase, demos: &[&DialogueCase], noise_seed: u64) -> Result<String> {
    let gold = test.rewrite_or_err()?;
    let target = omission_of(test)?;
    let mut matched = 0usize;
    for d in demos {
        if omission_of(d)? == target {
            matched += 1;
        }
    }
    let rho = if demos.is_empty() {
        SIM_MAX_CORRUPTION
    } else {
        SIM_MAX_CORRUPTION * (1.0 - matched as f64 / demos.len() as f64)
    };

    let mut key: Vec<&str> = demos.iter().map(|d| d.id.as_str()).collect();
    key.sort_unstable();
    key.insert(0, test.id.as_str());
    let mut rng = substream(noise_seed, "sim-noise", &key);

    let gold_tokens = tokenize(gold, TokenizeMode::Word);
    let incomplete = tokenize(&test.incomplete, TokenizeMode::Word);
    // Walk the gold tokens, consuming the incomplete-utterance multiset the
    // same way the restoration metric does.
    let mut inc_budget: HashMap<&str, usize> = HashMap::new();
    for t in &incomplete {
        *inc_budget.entry(t.as_str()).or_default() += 1;
    }
    let mut kept = Vec::with_capacity(gold_tokens.len());
    let mut dropped = 0usize;
    for t in &gold_tokens {
        let from_incomplete = match inc_budget.get_mut(t.as_str()) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        };
        if !from_incomplete && rng.random::<f64>() < rho {
            dropped += 1;
            continue;
        }
        kept.push(t.as_str());
    }
    if dropped == 0 {
        Ok(gold.to_string())
    } else {
        Ok(kept.join(" "))
    }
}

/// Simulated backend: recovers case ids from the rendered prompt blocks and
/// answers with [`sim_generate`]. Temperature is ignored.
pub struct SimGenerator {
    template: PromptTemplate,
    cases: HashMap<String, DialogueCase>,
    example_blocks: HashMap<String, String>,
    test_blocks: HashMap<String, String>,
    noise_seed: u64,
}

impl SimGenerator {
    pub fn new(corpus: &CorpusSplit, template: &PromptTemplate, noise_seed: u64) -> Self {
        let mut example_blocks = HashMap::new();
        let mut test_blocks = HashMap::new();
        let mut cases = HashMap::new();
        // Ids are visited in sorted order so duplicated texts resolve to
        // the smallest id.
        let mut all: Vec<&DialogueCase> = corpus.all_cases().collect();
        all.sort_by(|a, b| a.id.cmp(&b.id));
        for case in all {
            if let Ok(block) = template.example_block(case) {
                example_blocks.entry(block).or_insert_with(|| case.id.clone());
            }
            test_blocks
                .entry(template.test_block(case))
                .or_insert_with(|| case.id.clone());
            cases.insert(case.id.clone(), case.clone());
        }
        SimGenerator {
            template: template.clone(),
            cases,
            example_blocks,
            test_blocks,
            noise_seed,
        }
    }

    /// Test id and demonstration ids encoded in a prompt.
    pub fn decode_prompt(&self, prompt: &str) -> Result<(String, Vec<String>)> {
        let (examples, test) = self
            .template
            .split_blocks(prompt)
            .ok_or_else(|| Error::InvalidArgument("prompt has no test block".into()))?;
        let test_id = self
            .test_blocks
            .get(test)
            .ok_or_else(|| Error::InvalidArgument("prompt test block matches no corpus case".into()))?;
        let demo_ids = examples
            .iter()
            .map(|b| {
                self.example_blocks
                    .get(*b)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument("prompt example matches no corpus case".into()))
            })
            .collect::<Result<_>>()?;
        Ok((test_id.clone(), demo_ids))
    }
}

impl Generator for SimGenerator {
    fn complete(&self, req: &GenRequest) -> Result<GenResponse> {
        let start = Instant::now();
        let (test_id, demo_ids) = self.decode_prompt(&req.prompt)?;
        let test = &self.cases[&test_id];
        let demos: Vec<&DialogueCase> = demo_ids.iter().map(|id| &self.cases[id]).collect();
        let text = sim_generate_cases(test, &demos, self.noise_seed)?;
        Ok(GenResponse {
            text,
            latency: start.elapsed(),
            attempts: 1,
        })
    }
}

/// Counting semaphore bounding in-flight requests.
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    /// Delay before the first retry; doubles for each further retry.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry.saturating_sub(1))
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    max_new_tokens: usize,
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

pub const API_KEY_ENV: &str = "GENERATOR_API_KEY";

/// JSON-over-HTTP backend: `POST {prompt, max_new_tokens, temperature}`,
/// expects `{text}`. Transport errors, timeouts, 429 and 5xx are retried
/// with exponential backoff.
pub struct HttpGenerator {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    retry: RetryPolicy,
    limiter: Semaphore,
}

enum Failure {
    Retryable(String, bool),
    Fatal(String),
}

impl HttpGenerator {
    pub fn new(url: impl Into<String>, max_in_flight: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        HttpGenerator {
            url: url.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            agent,
            retry: RetryPolicy::default(),
            limiter: Semaphore::new(max_in_flight),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    fn attempt(&self, req: &GenRequest) -> std::result::Result<String, Failure> {
        let mut builder = self
            .agent
            .post(&self.url)
            .config()
            .timeout_global(Some(req.timeout))
            .build();
        if let Some(key) = &self.api_key {
            builder = builder.header("Authorization", &format!("Bearer {key}"));
        }
        let body = WireRequest {
            prompt: &req.prompt,
            max_new_tokens: req.max_new_tokens,
            temperature: req.temperature,
        };
        let mut resp = match builder.send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(Failure::Retryable("timeout".into(), true)),
            Err(e) => return Err(Failure::Retryable(e.to_string(), false)),
        };
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Failure::Retryable(format!("HTTP {status}"), false));
        }
        if !(200..300).contains(&status) {
            return Err(Failure::Fatal(format!("HTTP {status}")));
        }
        let parsed: WireResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Failure::Fatal(format!("bad response body: {e}")))?;
        Ok(parsed.text)
    }
}

impl Generator for HttpGenerator {
    fn complete(&self, req: &GenRequest) -> Result<GenResponse> {
        let _permit = self.limiter.acquire();
        let start = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(req) {
                Ok(text) => {
                    return Ok(GenResponse {
                        text,
                        latency: start.elapsed(),
                        attempts,
                    })
                }
                Err(Failure::Fatal(message)) => return Err(Error::Transport { attempts, message }),
                Err(Failure::Retryable(message, timed_out)) => {
                    if attempts >= self.retry.max_attempts {
                        return Err(if timed_out {
                            Error::Timeout { attempts }
                        } else {
                            Error::Transport { attempts, message }
                        });
                    }
                    log::debug!("generator attempt {attempts} failed: {message}");
                    std::thread::sleep(self.retry.delay_before(attempts));
                }
            }
        }
    }
}
