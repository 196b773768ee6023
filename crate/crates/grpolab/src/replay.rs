//! Per-prompt replay buffer with strategy-driven retrieval.
//!
//! The buffer stores every past on-policy [`Sample`] together with the
//! behavior log-probabilities it was generated with, append-ordered per
//! prompt. Retrieval selects up to `g_off` stored samples according to a
//! [`ReplayStrategy`] and repackages them as an off-policy [`Group`];
//! it never mutates the buffer, so the same sample can be replayed many
//! times.
//!
//! Selection preference is always "most recent first": later born steps
//! win, and within a step later insertions win. Returned groups list their
//! samples in insertion order. When a strategy must choose among equally
//! good candidates (for example equal rewards), the preference order breaks
//! the tie, which keeps retrieval fully deterministic.
//!
//! Variance-driven selection uses a closed form instead of subset search:
//! for two-valued rewards the population variance of a size-k selection
//! with m high-reward members is `m (k - m) / k^2`, which is maximal when
//! the classes are as balanced as the buffer contents allow. The tests
//! verify this against exhaustive enumeration.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::rng::{substream, STREAM_REPLAY_RANDOM};
use crate::rollout::{Group, Origin, Sample};
use crate::tasks::PromptFeatures;

pub type ReplayResult<T> = Result<T, ReplayError>;

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("cannot insert an off-policy group (prompt {prompt_id}); replaying replays is not allowed")]
    OffPolicyInsert { prompt_id: usize },
    #[error("group prompt id {got} does not match target prompt {expected}")]
    PromptMismatch { expected: usize, got: usize },
    #[error("cannot insert an empty group for prompt {prompt_id}")]
    EmptyGroup { prompt_id: usize },
    #[error("sample reward {reward} for prompt {prompt_id} is not binary")]
    NonBinaryReward { prompt_id: usize, reward: f64 },
    #[error("insert for prompt {prompt_id} at born_step {got} is older than stored {prev}")]
    InsertOutOfOrder { prompt_id: usize, prev: u64, got: u64 },
    #[error(
        "stored reward {stored} for prompt {prompt_id} (born_step {born_step}) disagrees with \
         recomputed reward {recomputed}; the reward function must be pure"
    )]
    RewardMismatch {
        prompt_id: usize,
        born_step: u64,
        stored: f64,
        recomputed: f64,
    },
    #[error("retrieval group size must be >= 1")]
    InvalidGroupSize,
    #[error("recency window must be >= 1")]
    InvalidRecencyWindow,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialize: {0}")]
    Json(#[from] serde_json::Error),
}

/// How to select stored samples at retrieval time.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReplayStrategy {
    /// Never retrieve anything.
    #[default]
    None,
    /// Uniformly random subset, keyed by `(rng_seed, step, prompt_id)` so
    /// draws are reproducible and independent of iteration order.
    Random { rng_seed: u64 },
    /// Everything in the buffer, ignoring the group-size cap.
    FullScope,
    /// The `k` most recent samples; `k` defaults to the retrieval group
    /// size when absent.
    Recency {
        #[serde(default)]
        k: Option<usize>,
    },
    /// The highest-reward samples, most recent first among equals.
    RewardOriented,
    /// The selection maximizing population reward variance, balanced
    /// across reward classes, most recent first within a class.
    VarianceDriven,
}

/// Append-ordered per-prompt storage of past on-policy samples.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    by_prompt: BTreeMap<usize, Vec<Sample>>,
    capacity_per_prompt: Option<usize>,
}

impl ReplayBuffer {
    /// An unbounded buffer.
    pub fn new() -> Self {
        Self::default()
    }

    /// A buffer holding at most `capacity` samples per prompt, evicting
    /// the oldest first.
    pub fn with_capacity_per_prompt(capacity: usize) -> Self {
        Self {
            by_prompt: BTreeMap::new(),
            capacity_per_prompt: Some(capacity),
        }
    }

    /// Number of samples stored for one prompt.
    pub fn len(&self, prompt_id: usize) -> usize {
        self.by_prompt.get(&prompt_id).map_or(0, Vec::len)
    }

    /// Total samples stored across all prompts.
    pub fn total_len(&self) -> usize {
        self.by_prompt.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    /// Stored samples for a prompt, oldest first.
    pub fn samples(&self, prompt_id: usize) -> &[Sample] {
        self.by_prompt.get(&prompt_id).map_or(&[], Vec::as_slice)
    }

    /// Appends every sample of an on-policy group, evicting oldest samples
    /// if the per-prompt capacity is exceeded. Samples are stored verbatim,
    /// behavior log-probabilities included.
    pub fn insert(&mut self, prompt_id: usize, group: &Group) -> ReplayResult<()> {
        if group.origin != Origin::OnPolicy {
            return Err(ReplayError::OffPolicyInsert { prompt_id });
        }
        if group.prompt_id != prompt_id {
            return Err(ReplayError::PromptMismatch {
                expected: prompt_id,
                got: group.prompt_id,
            });
        }
        if group.is_empty() {
            return Err(ReplayError::EmptyGroup { prompt_id });
        }
        for s in &group.samples {
            if !(s.reward == 0.0 || s.reward == 1.0) {
                return Err(ReplayError::NonBinaryReward {
                    prompt_id,
                    reward: s.reward,
                });
            }
        }
        let stored = self.by_prompt.entry(prompt_id).or_default();
        if let Some(last) = stored.last() {
            let newest = group.samples.iter().map(|s| s.born_step).min().unwrap();
            if newest < last.born_step {
                return Err(ReplayError::InsertOutOfOrder {
                    prompt_id,
                    prev: last.born_step,
                    got: newest,
                });
            }
        }
        stored.extend(group.samples.iter().cloned());
        if let Some(cap) = self.capacity_per_prompt {
            if stored.len() > cap {
                let excess = stored.len() - cap;
                stored.drain(..excess);
            }
        }
        Ok(())
    }

    /// Selects up to `g_off` stored samples for the prompt and returns them
    /// as an off-policy group in insertion order. Returns `None` when the
    /// strategy is `None` or fewer than 2 samples are stored (a singleton
    /// group standardizes to nothing useful). Rewards are recomputed from
    /// the prompt and must equal the stored values.
    pub fn retrieve(
        &self,
        prompt: &PromptFeatures,
        strategy: &ReplayStrategy,
        g_off: usize,
        step: u64,
    ) -> ReplayResult<Option<Group>> {
        if g_off == 0 {
            return Err(ReplayError::InvalidGroupSize);
        }
        let stored = self.samples(prompt.prompt_id);
        if matches!(strategy, ReplayStrategy::None) || stored.len() < 2 {
            return Ok(None);
        }
        let mut picked: Vec<usize> = match strategy {
            ReplayStrategy::None => unreachable!("handled above"),
            ReplayStrategy::Random { rng_seed } => {
                let take = g_off.min(stored.len());
                let mut rng = substream(
                    *rng_seed,
                    STREAM_REPLAY_RANDOM,
                    step,
                    prompt.prompt_id as u64,
                    0,
                );
                sample_indices(&mut rng, stored.len(), take).into_vec()
            }
            ReplayStrategy::FullScope => (0..stored.len()).collect(),
            ReplayStrategy::Recency { k } => {
                let window = match k {
                    Some(0) => return Err(ReplayError::InvalidRecencyWindow),
                    Some(k) => *k,
                    None => g_off,
                };
                let take = window.min(stored.len());
                (stored.len() - take..stored.len()).collect()
            }
            ReplayStrategy::RewardOriented => {
                let take = g_off.min(stored.len());
                let mut order: Vec<usize> = (0..stored.len()).collect();
                order.sort_by(|&a, &b| {
                    stored[b]
                        .reward
                        .total_cmp(&stored[a].reward)
                        .then(b.cmp(&a))
                });
                order.truncate(take);
                order
            }
            ReplayStrategy::VarianceDriven => {
                variance_driven_selection(stored, g_off.min(stored.len()))
            }
        };
        picked.sort_unstable();
        let samples: Vec<Sample> = picked.iter().map(|&i| stored[i].clone()).collect();
        for s in &samples {
            let recomputed = prompt.reward(&s.tokens);
            if recomputed != s.reward {
                return Err(ReplayError::RewardMismatch {
                    prompt_id: prompt.prompt_id,
                    born_step: s.born_step,
                    stored: s.reward,
                    recomputed,
                });
            }
        }
        Ok(Some(Group {
            prompt_id: prompt.prompt_id,
            samples,
            origin: Origin::OffPolicy,
        }))
    }

    /// Dumps every stored sample as JSON lines, prompts in ascending id
    /// order and samples in insertion order.
    pub fn dump_jsonl(&self, path: &Path) -> ReplayResult<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for samples in self.by_prompt.values() {
            for s in samples {
                serde_json::to_writer(&mut w, s)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Indices of the variance-maximizing selection of size `k`: balance the
/// two reward classes as far as availability allows, preferring the high
/// class on odd sizes and the most recent samples within a class. If all
/// rewards coincide every selection has zero variance, so the most recent
/// `k` are returned.
fn variance_driven_selection(stored: &[Sample], k: usize) -> Vec<usize> {
    let lo = stored.iter().map(|s| s.reward).fold(f64::INFINITY, f64::min);
    let hi = stored.iter().map(|s| s.reward).fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return (stored.len() - k..stored.len()).collect();
    }
    let mid = (lo + hi) / 2.0;
    let high_class: Vec<usize> = (0..stored.len())
        .filter(|&i| stored[i].reward >= mid)
        .collect();
    let low_class: Vec<usize> = (0..stored.len())
        .filter(|&i| stored[i].reward < mid)
        .collect();
    let (n1, n0) = (high_class.len(), low_class.len());
    let want_high = ((k + 1) / 2).clamp(k.saturating_sub(n0), k.min(n1));
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    picked.extend(high_class.iter().rev().take(want_high));
    picked.extend(low_class.iter().rev().take(k - want_high));
    picked
}
