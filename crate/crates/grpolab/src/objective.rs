//! Clipped surrogate objectives for one prompt's groups.
//!
//! All objectives share one token-level building block: the importance
//! ratio `r_t` of the live policy against the data-generating policy,
//! combined with the sample's advantage `A` through
//! `min(r_t A, clip(r_t, 1 - eps, 1 + eps) A)`.
//!
//! - The on-policy objective recomputes the denominator log-probabilities
//!   from the step's frozen snapshot, so immediately after a snapshot every
//!   ratio is exactly 1.
//! - The off-policy objective takes the denominators from the sample's
//!   stored behavior log-probabilities instead and scales the whole term by
//!   `off_weight`.
//! - The combined objective is their sum over a shared advantage
//!   assignment.
//! - The KL-penalized variant subtracts `kl_beta` times the nonnegative
//!   per-token estimate `k3 = r_ref - ln r_ref - 1` with
//!   `r_ref = pi_ref / pi_live`.
//!
//! Values are reported as losses (negated objectives, to be minimized).
//! Gradients come from the expression-graph engine: the per-token weight
//! multiplying `d log pi_t` is constant at the evaluation point
//! (`r_t A` on the unclipped branch, 0 on the clipped branch,
//! `-kl_beta (1 - r_ref)` for the penalty), so each sample's gradient is
//! that of a weighted log-probability sum with frozen weights. The weights
//! are re-frozen at every evaluation, which keeps the gradient exact at the
//! current parameters; the finite-difference tests confirm this on both
//! sides of the clip boundary.
//!
//! Everything here handles a single prompt. Averaging across the prompts
//! of a batch (equal prompt weights) happens in the trainer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::advantage::{assign_advantages, AdvantageError, AdvantageMode};
use crate::diff::{DiffError, Tensor};
use crate::policy::{PolicyError, PolicyParameters};
use crate::rollout::Group;
use crate::tasks::PromptFeatures;

pub type ObjectiveResult<T> = Result<T, ObjectiveError>;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("invalid objective config: {0}")]
    InvalidConfig(String),
    #[error("{got} advantages for a group of {want} samples")]
    MismatchedAdvantages { got: usize, want: usize },
    #[error("group for prompt {got} evaluated against prompt {expected}")]
    PromptMismatch { expected: usize, got: usize },
    #[error(
        "sample for prompt {prompt_id} (born_step {born_step}) stores {got} behavior \
         log-probs for {want} tokens"
    )]
    MissingBehaviorLogProbs {
        prompt_id: usize,
        born_step: u64,
        got: usize,
        want: usize,
    },
    #[error("non-finite importance ratio at token {token_index} of prompt {prompt_id}")]
    NonFiniteRatio { prompt_id: usize, token_index: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
}

/// How a sample's token terms are normalized before group averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenNorm {
    /// Divide each sample's token sum by its own length.
    PerSequence,
    /// Divide by a fixed constant regardless of sample length, removing
    /// the length bias of per-sequence normalization (Liu et al. 2025,
    /// arXiv:2503.20783).
    DrGrpoConstant { max_len: usize },
}

impl Default for TokenNorm {
    fn default() -> Self {
        Self::PerSequence
    }
}

impl TokenNorm {
    /// The factor multiplying one sample's summed token terms.
    pub fn factor(&self, sample_len: usize) -> f64 {
        match self {
            Self::PerSequence => 1.0 / sample_len.max(1) as f64,
            Self::DrGrpoConstant { max_len } => 1.0 / *max_len as f64,
        }
    }
}

/// Hyperparameters of the surrogate objectives. Fields left out of a
/// config file keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    /// Clip half-width, in (0, 1).
    pub clip_epsilon: f64,
    /// KL penalty coefficient; 0 disables the penalty entirely.
    pub kl_beta: f64,
    /// Weight of the off-policy term in the combined objective.
    pub off_weight: f64,
    /// Token normalization mode.
    pub token_norm: TokenNorm,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_beta: 0.0,
            off_weight: 1.0,
            token_norm: TokenNorm::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> ObjectiveResult<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "clip_epsilon must be in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if !(self.kl_beta >= 0.0) || !self.kl_beta.is_finite() {
            return Err(ObjectiveError::InvalidConfig(format!(
                "kl_beta must be finite and >= 0, got {}",
                self.kl_beta
            )));
        }
        if !(self.off_weight >= 0.0) || !self.off_weight.is_finite() {
            return Err(ObjectiveError::InvalidConfig(format!(
                "off_weight must be finite and >= 0, got {}",
                self.off_weight
            )));
        }
        if let TokenNorm::DrGrpoConstant { max_len } = self.token_norm {
            if max_len == 0 {
                return Err(ObjectiveError::InvalidConfig(
                    "dr_grpo_constant max_len must be >= 1".to_string(),
                ));
            }
        }
        Ok(())
    }
}

/// The clipped token term `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// One evaluated surrogate: the loss (negated objective), its gradient per
/// parameter, and token-level diagnostics.
#[derive(Debug, Clone)]
pub struct SurrogateResult {
    /// Negated objective value, to be minimized.
    pub loss_value: f64,
    /// Gradient of the loss for every parameter tensor of the live policy.
    pub gradients: BTreeMap<String, Tensor>,
    /// Importance ratios per sample per token, in group order. For the
    /// combined objective the on-policy group's ratios come first.
    pub per_token_ratios: Vec<Vec<f64>>,
    /// Tokens whose clipped branch was strictly active.
    pub clipped_tokens: usize,
    /// Total tokens evaluated.
    pub total_tokens: usize,
    /// `clipped_tokens / total_tokens`, 0 when no tokens were evaluated.
    pub clipped_fraction: f64,
}

impl SurrogateResult {
    /// A zero loss with exactly-zero gradients shaped like `params`.
    pub fn zero(params: &PolicyParameters) -> Self {
        let gradients = params
            .tensors()
            .into_iter()
            .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            loss_value: 0.0,
            gradients,
            per_token_ratios: Vec::new(),
            clipped_tokens: 0,
            total_tokens: 0,
            clipped_fraction: 0.0,
        }
    }

    /// Adds another surrogate in place: losses and gradients sum, ratio
    /// diagnostics concatenate, the clipped fraction is recomputed over
    /// the combined token count.
    fn accumulate(&mut self, other: SurrogateResult) {
        self.loss_value += other.loss_value;
        for (name, tensor) in other.gradients {
            let acc = self
                .gradients
                .get_mut(&name)
                .expect("gradient maps share the parameter set");
            for (a, b) in acc.data_mut().iter_mut().zip(tensor.data()) {
                *a += b;
            }
        }
        self.per_token_ratios.extend(other.per_token_ratios);
        self.clipped_tokens += other.clipped_tokens;
        self.total_tokens += other.total_tokens;
        self.clipped_fraction = if self.total_tokens == 0 {
            0.0
        } else {
            self.clipped_tokens as f64 / self.total_tokens as f64
        };
    }
}

/// Where a sample's denominator log-probabilities come from.
enum Denominator<'a> {
    /// Recompute from a frozen snapshot (on-policy ratios).
    Snapshot(&'a PolicyParameters),
    /// Use the log-probabilities stored at generation time (off-policy
    /// ratios).
    Stored,
}

/// Shared core: the clipped surrogate of one group against one denominator
/// source, scaled by `outer_weight`, optionally with the KL penalty against
/// a reference policy.
fn group_surrogate(
    live: &PolicyParameters,
    prompt: &PromptFeatures,
    group: &Group,
    advantages: &[f64],
    denominator: Denominator,
    reference: Option<&PolicyParameters>,
    config: &ObjectiveConfig,
    outer_weight: f64,
) -> ObjectiveResult<SurrogateResult> {
    config.validate()?;
    if advantages.len() != group.len() {
        return Err(ObjectiveError::MismatchedAdvantages {
            got: advantages.len(),
            want: group.len(),
        });
    }
    if group.prompt_id != prompt.prompt_id {
        return Err(ObjectiveError::PromptMismatch {
            expected: prompt.prompt_id,
            got: group.prompt_id,
        });
    }

    let mut result = SurrogateResult::zero(live);
    if group.is_empty() || outer_weight == 0.0 {
        return Ok(result);
    }
    let group_weight = 1.0 / group.len() as f64;
    let eps = config.clip_epsilon;
    let beta = config.kl_beta;
    let mut objective = 0.0;

    for (sample, &adv) in group.samples.iter().zip(advantages) {
        let live_lp = live.sequence_log_probs(&prompt.feature_vector, &sample.tokens)?;
        let denom_lp: Vec<f64> = match denominator {
            Denominator::Snapshot(old) => {
                old.sequence_log_probs(&prompt.feature_vector, &sample.tokens)?
                    .values
            }
            Denominator::Stored => {
                if sample.behavior_log_probs.len() != sample.tokens.len() {
                    return Err(ObjectiveError::MissingBehaviorLogProbs {
                        prompt_id: sample.prompt_id,
                        born_step: sample.born_step,
                        got: sample.behavior_log_probs.len(),
                        want: sample.tokens.len(),
                    });
                }
                sample.behavior_log_probs.values.clone()
            }
        };
        let ref_lp: Option<Vec<f64>> = match (reference, beta > 0.0) {
            (Some(refp), true) => Some(
                refp.sequence_log_probs(&prompt.feature_vector, &sample.tokens)?
                    .values,
            ),
            _ => None,
        };

        let norm = config.token_norm.factor(sample.tokens.len());
        let scale = group_weight * norm;
        let mut ratios = Vec::with_capacity(sample.tokens.len());
        let mut weights = Vec::with_capacity(sample.tokens.len());
        let mut sample_term = 0.0;
        for (t, (&lp_live, &lp_denom)) in
            live_lp.values.iter().zip(&denom_lp).enumerate()
        {
            let ratio = (lp_live - lp_denom).exp();
            if !ratio.is_finite() {
                return Err(ObjectiveError::NonFiniteRatio {
                    prompt_id: sample.prompt_id,
                    token_index: t,
                });
            }
            let unclipped = ratio * adv;
            let term = clipped_term(ratio, adv, eps);
            let clipped_active = term < unclipped;
            if clipped_active {
                result.clipped_tokens += 1;
            }
            result.total_tokens += 1;
            sample_term += term;
            // Loss weight on d log pi_t: the negated objective weight.
            // Unclipped branch contributes ratio * advantage; the actively
            // clipped branch is constant in the parameters.
            let mut w = if clipped_active { 0.0 } else { ratio * adv };
            if let Some(ref_lp) = &ref_lp {
                let r_ref = (ref_lp[t] - lp_live).exp();
                sample_term -= beta * (r_ref - (ref_lp[t] - lp_live) - 1.0);
                w -= beta * (1.0 - r_ref);
            }
            weights.push(-outer_weight * scale * w);
            ratios.push(ratio);
        }
        objective += scale * sample_term;
        result.per_token_ratios.push(ratios);

        if weights.iter().any(|w| *w != 0.0) {
            let (graph, bindings) =
                live.weighted_logprob_graph(&prompt.feature_vector, &sample.tokens, &weights)?;
            let names: Vec<&str> = result.gradients.keys().map(String::as_str).collect();
            let grads = graph.gradient(&bindings, &names)?;
            for (name, tensor) in grads {
                let acc = result.gradients.get_mut(&name).expect("known parameter");
                for (a, b) in acc.data_mut().iter_mut().zip(tensor.data()) {
                    *a += b;
                }
            }
        }
    }

    result.loss_value = -outer_weight * objective;
    result.clipped_fraction = if result.total_tokens == 0 {
        0.0
    } else {
        result.clipped_tokens as f64 / result.total_tokens as f64
    };
    Ok(result)
}

/// The on-policy clipped surrogate, with ratios against a frozen snapshot.
pub fn on_policy_objective(
    live: &PolicyParameters,
    snapshot_old: &PolicyParameters,
    prompt: &PromptFeatures,
    on_group: &Group,
    advantages: &[f64],
    config: &ObjectiveConfig,
) -> ObjectiveResult<SurrogateResult> {
    group_surrogate(
        live,
        prompt,
        on_group,
        advantages,
        Denominator::Snapshot(snapshot_old),
        None,
        config,
        1.0,
    )
}

/// The off-policy clipped surrogate: same structure, but ratios form
/// against the stored behavior log-probabilities and the whole term is
/// scaled by `off_weight`. An empty group yields a zero result.
pub fn off_policy_objective(
    live: &PolicyParameters,
    prompt: &PromptFeatures,
    off_group: &Group,
    advantages: &[f64],
    config: &ObjectiveConfig,
) -> ObjectiveResult<SurrogateResult> {
    group_surrogate(
        live,
        prompt,
        off_group,
        advantages,
        Denominator::Stored,
        None,
        config,
        config.off_weight,
    )
}

/// The combined objective: advantages are assigned across the two groups
/// by `mode`, then the on-policy and weighted off-policy surrogates sum.
/// Without an off-policy group this is exactly the on-policy objective.
pub fn repo_objective(
    live: &PolicyParameters,
    snapshot_old: &PolicyParameters,
    prompt: &PromptFeatures,
    on_group: &Group,
    off_group: Option<&Group>,
    mode: AdvantageMode,
    config: &ObjectiveConfig,
) -> ObjectiveResult<SurrogateResult> {
    let (adv_on, adv_off) = assign_advantages(on_group, off_group, mode)?;
    let mut result =
        on_policy_objective(live, snapshot_old, prompt, on_group, &adv_on, config)?;
    if let Some(off_group) = off_group {
        if !off_group.is_empty() {
            result.accumulate(off_policy_objective(
                live, prompt, off_group, &adv_off, config,
            )?);
        }
    }
    Ok(result)
}

/// The KL-penalized on-policy objective: the clipped surrogate minus
/// `kl_beta` times the per-token `k3` estimate of `KL(pi_live || pi_ref)`.
/// With `kl_beta = 0` this is exactly [`on_policy_objective`].
pub fn grpo_objective(
    live: &PolicyParameters,
    snapshot_old: &PolicyParameters,
    snapshot_ref: &PolicyParameters,
    prompt: &PromptFeatures,
    on_group: &Group,
    advantages: &[f64],
    config: &ObjectiveConfig,
) -> ObjectiveResult<SurrogateResult> {
    group_surrogate(
        live,
        prompt,
        on_group,
        advantages,
        Denominator::Snapshot(snapshot_old),
        Some(snapshot_ref),
        config,
        1.0,
    )
}
