//! Synthetic prompt generators with deterministic binary rewards.
//!
//! Three task families cover the experimental needs of the crate:
//!
//! - `modular_addition`: answer `(a + b) mod m`. Features one-hot the pair
//!   `(a, b)` so even a log-linear policy can represent the answer table
//!   (modular addition over concatenated one-hots is not linearly
//!   separable, for the same reason XOR is not).
//! - `parity`: answer the XOR of an `n`-bit string. Features one-hot the
//!   full bit pattern, again keeping the task linearly representable.
//! - `controlled_difficulty`: no right answer to compute; each prompt gets
//!   a seeded winning set of first tokens sized `round(p * vocab_size)`, so
//!   a uniform random policy succeeds with probability close to `p`. This
//!   exists to manufacture reward-uniform groups on demand.
//!
//! Rewards are pure functions into `{0.0, 1.0}`: exact match of the output
//! (truncated at the end-of-sequence token) against the stored ground truth,
//! or first-token membership in the winning set. Recomputing a reward later,
//! for example when a sample is retrieved from a replay buffer, gives the
//! value observed at generation time.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{TokenId, EOS_TOKEN};
use crate::rng::{substream, STREAM_TASK_ITEM, STREAM_TASK_WINNING_SET};

pub type TaskResult<T> = Result<T, TaskError>;

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which synthetic task to generate, with its kind-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Answer `(a + b) mod modulus`; value `v` is encoded as token `v + 1`.
    ModularAddition { modulus: usize },
    /// Answer the parity of a random bit string; bit `b` becomes token
    /// `b + 1`.
    Parity { bit_length: usize },
    /// First-token membership in a per-prompt winning set of size
    /// `round(success_probability * vocab_size)`.
    ControlledDifficulty {
        success_probability: f64,
        vocab_size: usize,
    },
}

/// A reproducible dataset request: task family, size, and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub kind: TaskKind,
    /// Number of prompts to generate. Must be at least 1.
    pub dataset_size: usize,
    /// Seed for item content and winning-set draws.
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> TaskResult<()> {
        if self.dataset_size < 1 {
            return Err(TaskError::InvalidSpec(
                "dataset_size must be >= 1".to_string(),
            ));
        }
        match &self.kind {
            TaskKind::ModularAddition { modulus } => {
                if *modulus < 2 {
                    return Err(TaskError::InvalidSpec(format!(
                        "modulus must be >= 2, got {modulus}"
                    )));
                }
            }
            TaskKind::Parity { bit_length } => {
                if !(1..=16).contains(bit_length) {
                    return Err(TaskError::InvalidSpec(format!(
                        "bit_length must be in 1..=16, got {bit_length}"
                    )));
                }
            }
            TaskKind::ControlledDifficulty {
                success_probability,
                vocab_size,
            } => {
                if !(0.0..=1.0).contains(success_probability) {
                    return Err(TaskError::InvalidSpec(format!(
                        "success_probability must be in [0, 1], got {success_probability}"
                    )));
                }
                if *vocab_size < 2 {
                    return Err(TaskError::InvalidSpec(format!(
                        "vocab_size must be >= 2, got {vocab_size}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Length of the feature vectors this task produces.
    pub fn feature_dim(&self) -> usize {
        match &self.kind {
            TaskKind::ModularAddition { modulus } => modulus * modulus,
            TaskKind::Parity { bit_length } => 1 << bit_length,
            TaskKind::ControlledDifficulty { .. } => self.dataset_size,
        }
    }

    /// Smallest vocabulary the policy needs for this task's answers.
    pub fn min_vocab_size(&self) -> usize {
        match &self.kind {
            TaskKind::ModularAddition { modulus } => modulus + 1,
            TaskKind::Parity { .. } => 3,
            TaskKind::ControlledDifficulty { vocab_size, .. } => *vocab_size,
        }
    }

    /// Generates the dataset. Deterministic in the spec: the same spec
    /// always yields the identical prompt list, with distinct prompt ids
    /// `0..dataset_size`.
    pub fn generate_dataset(&self) -> TaskResult<Vec<PromptFeatures>> {
        self.validate()?;
        let prompts = (0..self.dataset_size)
            .map(|prompt_id| match &self.kind {
                TaskKind::ModularAddition { modulus } => {
                    let mut rng = substream(self.seed, STREAM_TASK_ITEM, prompt_id as u64, 0, 0);
                    let a = rng.random_range(0..*modulus);
                    let b = rng.random_range(0..*modulus);
                    PromptFeatures::modular_addition(*modulus, a, b, prompt_id)
                }
                TaskKind::Parity { bit_length } => {
                    let mut rng = substream(self.seed, STREAM_TASK_ITEM, prompt_id as u64, 0, 0);
                    let bits: Vec<u8> =
                        (0..*bit_length).map(|_| rng.random_range(0..=1)).collect();
                    PromptFeatures::parity(&bits, prompt_id)
                }
                TaskKind::ControlledDifficulty {
                    success_probability,
                    vocab_size,
                } => {
                    let k = (success_probability * *vocab_size as f64).round() as usize;
                    let mut rng =
                        substream(self.seed, STREAM_TASK_WINNING_SET, prompt_id as u64, 0, 0);
                    let winning: BTreeSet<TokenId> =
                        sample_indices(&mut rng, *vocab_size, k).into_iter().collect();
                    PromptFeatures::controlled_difficulty(
                        winning,
                        prompt_id,
                        self.dataset_size,
                    )
                }
            })
            .collect();
        Ok(prompts)
    }
}

/// One prompt: an id, the feature vector the policy consumes, and what
/// counts as a correct output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFeatures {
    pub prompt_id: usize,
    pub feature_vector: Vec<f64>,
    /// The unique correct output for exact-match tasks; empty when a
    /// winning set is present instead.
    pub ground_truth: Vec<TokenId>,
    /// For the controlled-difficulty task: the first tokens that score 1.0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub winning_set: Option<BTreeSet<TokenId>>,
}

impl PromptFeatures {
    /// Prompt asking for `(a + b) mod modulus`. Features one-hot the pair
    /// `(a, b)` at index `a * modulus + b`.
    pub fn modular_addition(modulus: usize, a: usize, b: usize, prompt_id: usize) -> Self {
        let mut feature_vector = vec![0.0; modulus * modulus];
        feature_vector[a * modulus + b] = 1.0;
        Self {
            prompt_id,
            feature_vector,
            ground_truth: vec![(a + b) % modulus + 1],
            winning_set: None,
        }
    }

    /// Prompt asking for the parity of `bits`. Features one-hot the whole
    /// pattern, read as a big-endian binary number.
    pub fn parity(bits: &[u8], prompt_id: usize) -> Self {
        let pattern = bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
        let mut feature_vector = vec![0.0; 1 << bits.len()];
        feature_vector[pattern] = 1.0;
        let parity = bits.iter().fold(0u8, |acc, &b| acc ^ b);
        Self {
            prompt_id,
            feature_vector,
            ground_truth: vec![parity as usize + 1],
            winning_set: None,
        }
    }

    /// Prompt whose reward is first-token membership in `winning`. Features
    /// one-hot the prompt id within the dataset.
    pub fn controlled_difficulty(
        winning: BTreeSet<TokenId>,
        prompt_id: usize,
        dataset_size: usize,
    ) -> Self {
        let mut feature_vector = vec![0.0; dataset_size];
        feature_vector[prompt_id] = 1.0;
        Self {
            prompt_id,
            feature_vector,
            ground_truth: Vec::new(),
            winning_set: Some(winning),
        }
    }

    /// Binary reward for an output. Exact-match tasks compare the output,
    /// truncated at the end-of-sequence token, against the ground truth;
    /// winning-set tasks test the output's first token. Pure: the same
    /// arguments always give the same value, and the value is exactly
    /// 0.0 or 1.0.
    pub fn reward(&self, output: &[TokenId]) -> f64 {
        let correct = match &self.winning_set {
            Some(winning) => output.first().is_some_and(|t| winning.contains(t)),
            None => truncate_at_eos(output) == self.ground_truth.as_slice(),
        };
        if correct {
            1.0
        } else {
            0.0
        }
    }
}

/// The prefix of `output` before the first end-of-sequence token.
pub fn truncate_at_eos(output: &[TokenId]) -> &[TokenId] {
    match output.iter().position(|&t| t == EOS_TOKEN) {
        Some(i) => &output[..i],
        None => output,
    }
}

/// Writes prompts as JSON lines.
pub fn write_jsonl(path: &Path, prompts: &[PromptFeatures]) -> TaskResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in prompts {
        serde_json::to_writer(&mut w, p).map_err(|source| TaskError::Json { line: 0, source })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads prompts written by [`write_jsonl`].
pub fn read_jsonl(path: &Path) -> TaskResult<Vec<PromptFeatures>> {
    let r = BufReader::new(File::open(path)?);
    let mut prompts = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p = serde_json::from_str(&line).map_err(|source| TaskError::Json {
            line: i + 1,
            source,
        })?;
        prompts.push(p);
    }
    Ok(prompts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn modadd_spec() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::ModularAddition { modulus: 7 },
            dataset_size: 20,
            seed: 5,
        }
    }

    #[test]
    fn modular_addition_worked_example() {
        let p = PromptFeatures::modular_addition(7, 3, 5, 0);
        assert_eq!(p.ground_truth, vec![(3 + 5) % 7 + 1]);
        assert_eq!(p.ground_truth, vec![2]);
        assert_eq!(p.feature_vector.len(), 49);
        assert_eq!(p.feature_vector[3 * 7 + 5], 1.0);
        assert_eq!(p.feature_vector.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn parity_worked_example() {
        let p = PromptFeatures::parity(&[1, 0, 1, 1], 0);
        assert_eq!(p.ground_truth, vec![2], "parity of 1011 is 1, token 2");
        assert_eq!(p.feature_vector.len(), 16);
        assert_eq!(p.feature_vector[0b1011], 1.0);
        let q = PromptFeatures::parity(&[1, 0, 0, 1], 1);
        assert_eq!(q.ground_truth, vec![1], "parity of 1001 is 0, token 1");
    }

    #[test]
    fn reward_is_exact_match_after_eos_truncation() {
        let p = PromptFeatures::modular_addition(7, 3, 5, 0);
        assert_eq!(p.reward(&[2]), 1.0);
        assert_eq!(p.reward(&[2, EOS_TOKEN]), 1.0);
        assert_eq!(p.reward(&[3]), 0.0, "one token off");
        assert_eq!(p.reward(&[2, 4]), 0.0, "trailing garbage before eos");
        assert_eq!(p.reward(&[EOS_TOKEN]), 0.0, "empty output");
        assert_eq!(p.reward(&[EOS_TOKEN, 2]), 0.0, "eos truncates first");
    }

    #[test]
    fn rewards_are_binary_and_pure() {
        let spec = modadd_spec();
        let prompts = spec.generate_dataset().unwrap();
        let outputs: Vec<Vec<TokenId>> =
            vec![vec![], vec![0], vec![1], vec![2, 0], vec![5, 5, 5], vec![7]];
        for p in &prompts {
            for o in &outputs {
                let r1 = p.reward(o);
                let r2 = p.reward(o);
                assert!(r1 == 0.0 || r1 == 1.0);
                assert_eq!(r1.to_bits(), r2.to_bits());
            }
        }
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let spec = modadd_spec();
        assert_eq!(spec.generate_dataset().unwrap(), spec.generate_dataset().unwrap());
        let other = TaskSpec { seed: 6, ..modadd_spec() };
        assert_ne!(spec.generate_dataset().unwrap(), other.generate_dataset().unwrap());
    }

    #[test]
    fn prompt_ids_are_distinct_and_sequential() {
        for spec in [
            modadd_spec(),
            TaskSpec {
                kind: TaskKind::Parity { bit_length: 4 },
                dataset_size: 10,
                seed: 0,
            },
            TaskSpec {
                kind: TaskKind::ControlledDifficulty {
                    success_probability: 0.5,
                    vocab_size: 8,
                },
                dataset_size: 10,
                seed: 0,
            },
        ] {
            let prompts = spec.generate_dataset().unwrap();
            for (i, p) in prompts.iter().enumerate() {
                assert_eq!(p.prompt_id, i);
                assert_eq!(p.feature_vector.len(), spec.feature_dim());
                assert!(p.feature_vector.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn controlled_difficulty_winning_sets_have_requested_size() {
        let vocab = 8;
        for (p, expected) in [(0.0, 0), (0.25, 2), (0.5, 4), (1.0, 8)] {
            let spec = TaskSpec {
                kind: TaskKind::ControlledDifficulty {
                    success_probability: p,
                    vocab_size: vocab,
                },
                dataset_size: 12,
                seed: 3,
            };
            for prompt in spec.generate_dataset().unwrap() {
                let winning = prompt.winning_set.as_ref().unwrap();
                assert_eq!(winning.len(), expected, "p = {p}");
                assert!(winning.iter().all(|&t| t < vocab));
                let wins = (0..vocab).filter(|t| prompt.reward(&[*t]) == 1.0).count();
                assert_eq!(wins, expected, "reward must agree with the set");
            }
        }
    }

    #[test]
    fn controlled_difficulty_full_set_accepts_everything() {
        let spec = TaskSpec {
            kind: TaskKind::ControlledDifficulty {
                success_probability: 1.0,
                vocab_size: 6,
            },
            dataset_size: 4,
            seed: 1,
        };
        for prompt in spec.generate_dataset().unwrap() {
            for t in 0..6 {
                assert_eq!(prompt.reward(&[t, 3, 3]), 1.0);
            }
        }
    }

    #[test]
    fn controlled_difficulty_sets_vary_across_prompts() {
        let spec = TaskSpec {
            kind: TaskKind::ControlledDifficulty {
                success_probability: 0.5,
                vocab_size: 8,
            },
            dataset_size: 16,
            seed: 0,
        };
        let prompts = spec.generate_dataset().unwrap();
        let distinct: BTreeSet<_> = prompts
            .iter()
            .map(|p| p.winning_set.clone().unwrap())
            .collect();
        assert!(distinct.len() > 1, "winning sets should not all coincide");
    }

    #[test]
    fn validation_rejects_bad_specs() {
        for spec in [
            TaskSpec { dataset_size: 0, ..modadd_spec() },
            TaskSpec {
                kind: TaskKind::ModularAddition { modulus: 1 },
                ..modadd_spec()
            },
            TaskSpec {
                kind: TaskKind::Parity { bit_length: 0 },
                ..modadd_spec()
            },
            TaskSpec {
                kind: TaskKind::Parity { bit_length: 17 },
                ..modadd_spec()
            },
            TaskSpec {
                kind: TaskKind::ControlledDifficulty {
                    success_probability: 1.5,
                    vocab_size: 8,
                },
                ..modadd_spec()
            },
            TaskSpec {
                kind: TaskKind::ControlledDifficulty {
                    success_probability: 0.5,
                    vocab_size: 1,
                },
                ..modadd_spec()
            },
        ] {
            assert!(spec.validate().is_err(), "accepted {spec:?}");
        }
    }

    #[test]
    fn jsonl_roundtrip_preserves_datasets() {
        let dir = tempfile::tempdir().unwrap();
        for spec in [
            modadd_spec(),
            TaskSpec {
                kind: TaskKind::ControlledDifficulty {
                    success_probability: 0.5,
                    vocab_size: 8,
                },
                dataset_size: 6,
                seed: 2,
            },
        ] {
            let prompts = spec.generate_dataset().unwrap();
            let path = dir.path().join("dataset.jsonl");
            write_jsonl(&path, &prompts).unwrap();
            let loaded = read_jsonl(&path).unwrap();
            assert_eq!(prompts, loaded);
        }
    }

    #[test]
    fn task_spec_parses_from_toml_and_json() {
        let toml_spec: TaskSpec = toml::from_str(
            "kind = \"modular_addition\"\nmodulus = 7\ndataset_size = 64\nseed = 11\n",
        )
        .unwrap();
        assert_eq!(
            toml_spec,
            TaskSpec {
                kind: TaskKind::ModularAddition { modulus: 7 },
                dataset_size: 64,
                seed: 11,
            }
        );
        let json_spec: TaskSpec = serde_json::from_str(
            "{\"kind\":\"controlled_difficulty\",\"success_probability\":0.25,\
             \"vocab_size\":8,\"dataset_size\":4,\"seed\":0}",
        )
        .unwrap();
        assert_eq!(json_spec.feature_dim(), 4);
        assert_eq!(json_spec.min_vocab_size(), 8);
    }

    #[test]
    fn feature_dims_and_min_vocab_follow_the_kind() {
        assert_eq!(modadd_spec().feature_dim(), 49);
        assert_eq!(modadd_spec().min_vocab_size(), 8);
        let parity = TaskSpec {
            kind: TaskKind::Parity { bit_length: 5 },
            dataset_size: 3,
            seed: 0,
        };
        assert_eq!(parity.feature_dim(), 32);
        assert_eq!(parity.min_vocab_size(), 3);
    }

    #[test]
    fn truncation_stops_at_first_eos() {
        assert_eq!(truncate_at_eos(&[1, 2, 0, 3]), &[1, 2]);
        assert_eq!(truncate_at_eos(&[0, 1]), &[] as &[TokenId]);
        assert_eq!(truncate_at_eos(&[4, 5]), &[4, 5]);
    }
}
