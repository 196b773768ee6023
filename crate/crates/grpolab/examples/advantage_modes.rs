//! Shows the advantage normalizers and groupings on small reward vectors:
//! standardized vs mean-only advantages, split vs mixed treatment of
//! replayed samples, and the exact zero on uniform groups.
//!
//! ```text
//! cargo run --example advantage_modes
//! ```

use std::collections::BTreeSet;

use grpolab::advantage::{assign_advantages, group_advantages};
use grpolab::tasks::PromptFeatures;
use grpolab::{
    AdvantageGrouping, AdvantageMode, AdvantageNormalizer, Group, Origin, Sample,
    TokenLogProbs,
};

fn sample(reward: f64, born_step: u64) -> Sample {
    Sample {
        prompt_id: 0,
        tokens: vec![if reward > 0.5 { 1 } else { 2 }],
        behavior_log_probs: TokenLogProbs { values: vec![-1.0] },
        reward,
        born_step,
    }
}

fn group(rewards: &[f64], origin: Origin) -> Group {
    Group {
        prompt_id: 0,
        samples: rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| sample(r, i as u64 + 1))
            .collect(),
        origin,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let _prompt = PromptFeatures::controlled_difficulty(BTreeSet::from([1]), 0, 1);

    for rewards in [vec![1.0, 0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]] {
        println!("rewards {rewards:?}");
        for norm in [AdvantageNormalizer::Grpo, AdvantageNormalizer::DrGrpo] {
            let adv = group_advantages(&rewards, norm)?;
            println!("  {norm:?}: {adv:?}");
        }
    }

    // Uniform rewards collapse to exactly zero under both normalizers:
    // no sample stands out, so the update has nothing to say.
    for rewards in [vec![1.0; 4], vec![0.0; 4]] {
        let adv = group_advantages(&rewards, AdvantageNormalizer::Grpo)?;
        assert!(adv.iter().all(|a| *a == 0.0));
        println!("rewards {rewards:?}\n  uniform group -> exact zeros: {adv:?}");
    }

    // Split normalizes each group against its own statistics; mixed pools
    // both groups first, so a uniform on-policy group can still receive
    // nonzero advantages from the contrast with replayed failures.
    let on = group(&[1.0, 1.0], Origin::OnPolicy);
    let off = group(&[0.0, 0.0], Origin::OffPolicy);
    for grouping in [AdvantageGrouping::Split, AdvantageGrouping::Mixed] {
        let mode = AdvantageMode {
            normalizer: AdvantageNormalizer::Grpo,
            grouping,
        };
        let (adv_on, adv_off) = assign_advantages(&on, Some(&off), mode)?;
        println!(
            "\non rewards [1, 1] + replayed rewards [0, 0], {grouping:?}:\n  on  {adv_on:?}\n  off {adv_off:?}"
        );
    }
    Ok(())
}
