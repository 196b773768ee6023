//! Group sampling from a frozen behavior policy.
//!
//! Each optimization step samples a group of outputs per prompt from the
//! current parameter snapshot, scores them with the task reward, and
//! packages them as [`Sample`]s carrying the behavior log-probabilities
//! needed later for importance ratios.
//!
//! Every sample draws from its own RNG substream keyed by
//! `(seed, step, prompt_id, sample index)`, so results are bit-identical
//! whether prompts are processed sequentially, shuffled, or in parallel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{PolicyParameters, PolicyResult, TokenId, TokenLogProbs};
use crate::rng::{substream, STREAM_ROLLOUT};
use crate::tasks::PromptFeatures;

/// Whether a group was freshly sampled or retrieved from the replay buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    OnPolicy,
    OffPolicy,
}

/// One generated output with everything needed to reuse it later: the
/// tokens, the per-token log-probabilities under the policy that generated
/// them, the verified reward, and the step it was born at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt_id: usize,
    pub tokens: Vec<TokenId>,
    /// Per-token log-probabilities under the generating policy, always at
    /// temperature 1.0. Same length as `tokens`.
    pub behavior_log_probs: TokenLogProbs,
    /// Binary task reward, exactly 0.0 or 1.0.
    pub reward: f64,
    /// Global optimization step at which the sample was generated.
    pub born_step: u64,
}

/// A set of samples for one prompt, tagged by provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub prompt_id: usize,
    pub samples: Vec<Sample>,
    pub origin: Origin,
}

impl Group {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.reward).collect()
    }
}

/// Samples exactly `group_size` outputs for one prompt from the snapshot.
/// Sample `i` uses the substream keyed by `(seed, step, prompt_id, i)`, so
/// the group does not depend on any surrounding iteration order.
pub fn sample_group(
    snapshot: &PolicyParameters,
    prompt: &PromptFeatures,
    group_size: usize,
    temperature: f64,
    step: u64,
    seed: u64,
) -> PolicyResult<Group> {
    let mut samples = Vec::with_capacity(group_size);
    for i in 0..group_size {
        let mut rng = substream(seed, STREAM_ROLLOUT, step, prompt.prompt_id as u64, i as u32);
        let (tokens, behavior_log_probs) =
            snapshot.sample_output(&prompt.feature_vector, temperature, &mut rng)?;
        let reward = prompt.reward(&tokens);
        samples.push(Sample {
            prompt_id: prompt.prompt_id,
            tokens,
            behavior_log_probs,
            reward,
            born_step: step,
        });
    }
    Ok(Group {
        prompt_id: prompt.prompt_id,
        samples,
        origin: Origin::OnPolicy,
    })
}

/// Samples one group per prompt, preserving prompt order. With `parallel`
/// the prompts fan out across threads; the keyed substreams make the result
/// bit-identical to the sequential path.
pub fn sample_batch(
    snapshot: &PolicyParameters,
    prompts: &[PromptFeatures],
    group_size: usize,
    temperature: f64,
    step: u64,
    seed: u64,
    parallel: bool,
) -> PolicyResult<Vec<Group>> {
    if parallel {
        prompts
            .par_iter()
            .map(|p| sample_group(snapshot, p, group_size, temperature, step, seed))
            .collect()
    } else {
        prompts
            .iter()
            .map(|p| sample_group(snapshot, p, group_size, temperature, step, seed))
            .collect()
    }
}
