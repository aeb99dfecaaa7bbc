//! Demonstration selection for in-context incomplete-utterance rewriting.
//!
//! A bilinear cosine scoring policy chooses `k` solved examples from a
//! candidate pool for each test case. The policy is trained with REINFORCE
//! on rewards obtained by prompting a generator with the chosen examples and
//! scoring its rewrite, with a random-selection baseline subtracted.
//!
//! The crate also ships non-learned selectors (random, BM25, cosine kNN),
//! sentence-level metrics, a prompt renderer, a deterministic simulated
//! generator for offline experiments and an HTTP generator client.

pub mod analysis;
pub mod baselines;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod generator;
pub mod io;
pub mod metrics;
pub mod policy;
pub mod prompt;
pub mod rng;
pub mod selection;
pub mod trainer;

pub use corpus::{synth_corpus, tokenize, CorpusSplit, DialogueCase, SplitRole, TokenizeMode};
pub use encoder::EmbeddingTable;
pub use error::{Error, Result};
pub use metrics::{score_pair, MetricReport};
pub use policy::{DemonstrationState, PolicyParams};
pub use prompt::{Order, PromptTemplate};
pub use trainer::{RewardMetric, RewardRecord, TrainConfig};
