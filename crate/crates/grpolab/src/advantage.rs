//! Group-relative advantage estimation.
//!
//! Advantages are computed from a group's rewards alone: standardize
//! against the group mean (and, in the default form, the population
//! standard deviation). Every token of a sample shares its sample's scalar
//! advantage.
//!
//! Two independent knobs:
//!
//! - [`AdvantageNormalizer`]: `Grpo` divides the centered reward by the
//!   population std; `DrGrpo` subtracts the mean only, which removes the
//!   difficulty bias introduced by the std division (Liu et al. 2025,
//!   arXiv:2503.20783).
//! - [`AdvantageGrouping`]: with both an on-policy and a replayed group in
//!   hand, `Split` standardizes each group against its own statistics,
//!   while `Mixed` standardizes the union and partitions the result back.
//!
//! When a group's rewards are (numerically) uniform the advantages are all
//! exactly zero, never a 0/0 artifact. That makes "this step moved
//! nothing" an exactly detectable condition downstream.

use serde::{Deserialize, Serialize};

use crate::rollout::Group;

pub type AdvantageResult<T> = Result<T, AdvantageError>;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AdvantageError {
    #[error("cannot compute advantages of an empty reward list")]
    EmptyRewards,
    #[error("reward at index {0} is not finite")]
    NonFiniteReward(usize),
}

/// Per-sample scalar advantages for one group, in sample order. Token
/// `t` of sample `i` uses entry `i` unchanged.
pub type AdvantageSet = Vec<f64>;

/// How a group's rewards are turned into advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageNormalizer {
    /// `(R - mean) / std` with population std; all-zero on uniform rewards.
    #[default]
    Grpo,
    /// `R - mean` only.
    DrGrpo,
}

/// How on-policy and replayed groups share normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageGrouping {
    /// Each group standardized against its own mean and std.
    #[default]
    Split,
    /// One standardization over the union, partitioned back afterwards.
    Mixed,
}

/// The full estimator choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AdvantageMode {
    #[serde(default)]
    pub normalizer: AdvantageNormalizer,
    #[serde(default)]
    pub grouping: AdvantageGrouping,
}

/// Reward std guard: below this population std a group counts as uniform
/// and its advantages are exactly zero.
pub const UNIFORM_STD_THRESHOLD: f64 = 1e-8;

fn validate(rewards: &[f64]) -> AdvantageResult<()> {
    if rewards.is_empty() {
        return Err(AdvantageError::EmptyRewards);
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(AdvantageError::NonFiniteReward(i));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divisor `n`, not `n - 1`).
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Advantages of one group of rewards.
pub fn group_advantages(
    rewards: &[f64],
    normalizer: AdvantageNormalizer,
) -> AdvantageResult<AdvantageSet> {
    validate(rewards)?;
    let lo = rewards.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(vec![0.0; rewards.len()]);
    }
    let m = mean(rewards);
    match normalizer {
        AdvantageNormalizer::Grpo => {
            let std = population_std(rewards);
            if std < UNIFORM_STD_THRESHOLD {
                return Ok(vec![0.0; rewards.len()]);
            }
            Ok(rewards.iter().map(|r| (r - m) / std).collect())
        }
        AdvantageNormalizer::DrGrpo => Ok(rewards.iter().map(|r| r - m).collect()),
    }
}

/// Advantages for an on-policy group and an optional replayed group. With
/// `Split` grouping each group is standardized independently; with `Mixed`
/// the union's statistics apply to both. A missing or empty off-policy
/// group reduces both modes to plain [`group_advantages`] on the on-policy
/// rewards, with an empty off-policy result.
pub fn assign_advantages(
    on_group: &Group,
    off_group: Option<&Group>,
    mode: AdvantageMode,
) -> AdvantageResult<(AdvantageSet, AdvantageSet)> {
    let on_rewards = on_group.rewards();
    let off_rewards = off_group.map(|g| g.rewards()).unwrap_or_default();
    if off_rewards.is_empty() {
        return Ok((group_advantages(&on_rewards, mode.normalizer)?, Vec::new()));
    }
    match mode.grouping {
        AdvantageGrouping::Split => Ok((
            group_advantages(&on_rewards, mode.normalizer)?,
            group_advantages(&off_rewards, mode.normalizer)?,
        )),
        AdvantageGrouping::Mixed => {
            let union: Vec<f64> = on_rewards
                .iter()
                .chain(off_rewards.iter())
                .cloned()
                .collect();
            let mut all = group_advantages(&union, mode.normalizer)?;
            let off = all.split_off(on_rewards.len());
            Ok((all, off))
        }
    }
}
