//! Desk-scale laboratory for group-relative policy optimization.
//!
//! The crate trains a tiny autoregressive categorical policy on synthetic
//! verifiable-reward tasks with three closely related algorithms:
//!
//! - GRPO: clipped surrogate over group-relative advantages, optional KL
//!   penalty against a frozen reference policy.
//! - Dr. GRPO: the same surrogate with mean-only advantages and a constant
//!   token normalizer (Liu et al., 2025, arXiv:2503.20783).
//! - RePO: replay-enhanced policy optimization, which augments the on-policy
//!   objective with an off-policy clipped surrogate over groups retrieved
//!   from an experience buffer.
//!
//! Everything runs in f64 on CPU through a small reverse-mode autodiff engine
//! ([`diff`]), so gradients are checkable against finite differences and runs
//! are bit-reproducible for a fixed seed.
//!
//! Start with the runnable programs under `examples/`, or drive full runs
//! from a config file via the `grpolab` binary (`run` and `sweep`
//! subcommands).

pub mod advantage;
pub mod cli;
pub mod diff;
pub mod objective;
pub mod policy;
pub mod replay;
pub mod rollout;
pub mod tasks;
pub mod trainer;

mod rng;

pub use advantage::{AdvantageGrouping, AdvantageMode, AdvantageNormalizer};
pub use diff::{ExprGraph, GraphBuilder, Tensor};
pub use objective::{clipped_term, ObjectiveConfig, SurrogateResult, TokenNorm};
pub use policy::{PolicyConfig, PolicyParameters, TokenId, TokenLogProbs, EOS_TOKEN};
pub use replay::{ReplayBuffer, ReplayStrategy};
pub use rollout::{Group, Origin, Sample};
pub use tasks::{PromptFeatures, TaskKind, TaskSpec};
pub use trainer::{
    train, train_with_callback, Algorithm, RunMetrics, StepRecord, TrainConfig, Trainer,
};
