//! Keyed RNG substreams.
//!
//! Every random decision in the crate draws from a ChaCha8 stream whose
//! 32-byte seed encodes (run seed, purpose tag, key material). Streams are
//! therefore independent of each other and of processing order: sampling
//! completion `i` for prompt `p` at step `s` yields the same bytes no matter
//! which prompts were handled before it or on which thread.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const STREAM_POLICY_INIT: u32 = 1;
pub(crate) const STREAM_ROLLOUT: u32 = 2;
pub(crate) const STREAM_BATCH_SHUFFLE: u32 = 3;
pub(crate) const STREAM_REPLAY_RANDOM: u32 = 4;
pub(crate) const STREAM_TASK_ITEM: u32 = 5;
pub(crate) const STREAM_TASK_WINNING_SET: u32 = 6;

/// Builds the substream identified by `(seed, stream, a, b, c)`.
pub(crate) fn substream(seed: u64, stream: u32, a: u64, b: u64, c: u32) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    key[24..28].copy_from_slice(&c.to_le_bytes());
    key[28..32].copy_from_slice(&stream.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
