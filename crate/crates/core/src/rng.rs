//! Deterministic random streams.
//!
//! Every random decision in the pipeline draws from a stream keyed by
//! `(seed, labels...)`, so the outcome for an item does not depend on the
//! order in which workers happen to process it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// Derives an independent stream from a seed and a sequence of labels.
pub fn derive(seed: u64, labels: &[&[u8]]) -> Stream {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l);
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    Stream::from_seed(key)
}

/// Stream for one utterance within one epoch.
pub fn item_stream(seed: u64, epoch: usize, utterance_id: &str, purpose: &str) -> Stream {
    derive(
        seed,
        &[
            purpose.as_bytes(),
            &(epoch as u64).to_le_bytes(),
            utterance_id.as_bytes(),
        ],
    )
}

/// Stream for a purpose-wide decision such as the shuffle of one epoch.
pub fn epoch_stream(seed: u64, epoch: usize, purpose: &str) -> Stream {
    derive(seed, &[purpose.as_bytes(), &(epoch as u64).to_le_bytes()])
}
