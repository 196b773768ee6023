//! Fills a replay buffer with a known history and shows which samples
//! each retrieval strategy picks.
//!
//! ```text
//! cargo run --example replay_strategies
//! ```

use std::collections::BTreeSet;

use grpolab::tasks::PromptFeatures;
use grpolab::{Group, Origin, ReplayBuffer, ReplayStrategy, Sample, TokenLogProbs};

/// A sample consistent with a winning set of `{1}`: winners emit token 1,
/// losers token 2, so retrieval-time reward verification agrees.
fn sample(reward: f64, born_step: u64) -> Sample {
    Sample {
        prompt_id: 0,
        tokens: vec![if reward > 0.5 { 1 } else { 2 }],
        behavior_log_probs: TokenLogProbs { values: vec![-0.9] },
        reward,
        born_step,
    }
}

fn describe(group: &Option<Group>) -> String {
    match group {
        None => "nothing".into(),
        Some(g) => g
            .samples
            .iter()
            .map(|s| format!("step {} (r={})", s.born_step, s.reward))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let prompt = PromptFeatures::controlled_difficulty(BTreeSet::from([1]), 0, 1);

    // History of ten single-sample groups with rewards 1,0,0,1,0,1,1,0,0,1.
    let rewards = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
    let mut buffer = ReplayBuffer::new();
    for (i, &r) in rewards.iter().enumerate() {
        let born = (i + 1) as u64;
        buffer.insert(
            0,
            &Group {
                prompt_id: 0,
                samples: vec![sample(r, born)],
                origin: Origin::OnPolicy,
            },
        )?;
    }
    println!("buffer holds {} samples born at steps 1..=10", buffer.total_len());
    println!("rewards by born step: {rewards:?}\n");

    let strategies = [
        ReplayStrategy::None,
        ReplayStrategy::Random { rng_seed: 0 },
        ReplayStrategy::FullScope,
        ReplayStrategy::Recency { k: None },
        ReplayStrategy::Recency { k: Some(6) },
        ReplayStrategy::RewardOriented,
        ReplayStrategy::VarianceDriven,
    ];
    for strategy in &strategies {
        let picked = buffer.retrieve(&prompt, strategy, 4, 11)?;
        println!("{strategy:?}\n  -> {}\n", describe(&picked));
    }

    // Retrieval never consumes: the buffer is unchanged afterwards.
    assert_eq!(buffer.total_len(), rewards.len());
    println!("buffer still holds {} samples after retrieval", buffer.total_len());
    Ok(())
}
