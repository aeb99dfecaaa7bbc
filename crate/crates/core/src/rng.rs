//! Named random substreams derived from a single run seed.
//!
//! Every stochastic component (policy sampling, baseline rollouts, simulated
//! generator noise, corpus synthesis) draws from its own ChaCha stream whose
//! key is a SHA-256 digest of the run seed, a label and any number of
//! distinguishing parts. Streams are therefore independent of thread
//! scheduling and of the order in which cases are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn stream_key<S: AsRef<str>>(seed: u64, label: &str, parts: &[S]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for part in parts {
        let part = part.as_ref();
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hasher.finalize().into()
}

pub fn substream<S: AsRef<str>>(seed: u64, label: &str, parts: &[S]) -> StreamRng {
    ChaCha8Rng::from_seed(stream_key(seed, label, parts))
}

/// Hex SHA-256 of a byte buffer, used for manifests and checkpoint hashes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
