//! Demonstrates the relationship between the off-policy and on-policy
//! gradients at the moment the live policy equals the sampling snapshot:
//! for a single-token sample with importance ratio `r` against its stored
//! behavior probability, the off-policy gradient is exactly `r` times the
//! on-policy gradient (as long as the ratio is unclipped).
//!
//! ```text
//! cargo run --example gradient_ratio_identity
//! ```

use grpolab::objective::{off_policy_objective, on_policy_objective};
use grpolab::rollout::sample_group;
use grpolab::tasks::{TaskKind, TaskSpec};
use grpolab::{ObjectiveConfig, Origin, PolicyConfig, PolicyParameters};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let task = TaskSpec {
        kind: TaskKind::ControlledDifficulty {
            success_probability: 0.5,
            vocab_size: 6,
        },
        dataset_size: 1,
        seed: 2,
    };
    let dataset = task.generate_dataset()?;
    let prompt = &dataset[0];

    // The sampler: where the stored behavior log-probs come from.
    let sampler = PolicyParameters::init(&PolicyConfig {
        vocab_size: task.min_vocab_size(),
        max_output_len: 1,
        prompt_feature_dim: task.feature_dim(),
        embed_dim: 4,
        hidden_dim: 0,
        init_scale: 0.6,
        seed: 3,
    })?;
    // The live policy: a differently initialized network, so ratios != 1.
    let live = PolicyParameters::init(&PolicyConfig {
        seed: 4,
        ..*sampler.config()
    })?;

    let group = sample_group(&sampler, prompt, 6, 1.0, 1, 5)?;
    let config = ObjectiveConfig {
        clip_epsilon: 0.99, // nearly wide open; clipped samples are skipped
        ..ObjectiveConfig::default()
    };
    let advantages: Vec<f64> = (0..group.len()).map(|i| 0.5 + 0.25 * i as f64).collect();

    let mut verified = 0;
    println!("sample   ratio r      max |g_off - r * g_on|");
    for (i, sample) in group.samples.clone().into_iter().enumerate() {
        let single = grpolab::Group {
            prompt_id: group.prompt_id,
            samples: vec![sample],
            origin: Origin::OffPolicy,
        };
        let adv = [advantages[i]];
        // On-policy form: denominators rescored from the live snapshot
        // itself, so its ratio is 1 and only the advantage weights differ.
        let on = on_policy_objective(&live, &live, prompt, &single, &adv, &config)?;
        // Off-policy form: denominators are the stored sampler log-probs.
        let off = off_policy_objective(&live, prompt, &single, &adv, &config)?;
        let r = off.per_token_ratios[0][0];
        if off.clipped_tokens > 0 {
            println!("{i:>6}   {r:<10.6}  (clipped; identity does not apply)");
            continue;
        }

        let mut worst: f64 = 0.0;
        for (name, g_on) in &on.gradients {
            let g_off = &off.gradients[name];
            for (a, b) in g_off.data().iter().zip(g_on.data()) {
                worst = worst.max((a - r * b).abs());
            }
        }
        println!("{i:>6}   {r:<10.6}  {worst:>20.3e}");
        assert!(worst < 1e-12);
        verified += 1;
    }

    assert!(verified >= 4, "too few unclipped samples to demonstrate");
    println!("\nidentity held on all {verified} unclipped samples (tolerance 1e-12)");
    Ok(())
}
