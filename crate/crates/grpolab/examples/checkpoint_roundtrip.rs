//! Saves a policy checkpoint, loads it back, and verifies that every
//! tensor and every sampled output is bit-identical.
//!
//! ```text
//! cargo run --example checkpoint_roundtrip
//! ```

use grpolab::rollout::sample_group;
use grpolab::tasks::{TaskKind, TaskSpec};
use grpolab::{PolicyConfig, PolicyParameters};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let task = TaskSpec {
        kind: TaskKind::Parity { bit_length: 4 },
        dataset_size: 16,
        seed: 0,
    };
    let dataset = task.generate_dataset()?;
    let params = PolicyParameters::init(&PolicyConfig {
        vocab_size: task.min_vocab_size(),
        max_output_len: 2,
        prompt_feature_dim: task.feature_dim(),
        embed_dim: 10,
        hidden_dim: 6,
        init_scale: 0.2,
        seed: 21,
    })?;

    let dir = std::env::temp_dir().join("grpolab_checkpoint_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("policy.grpl");
    params.save(&path)?;
    let bytes = std::fs::metadata(&path)?.len();
    println!(
        "saved {} parameters ({bytes} bytes) to {}",
        params.config().param_count(),
        path.display()
    );

    let restored = PolicyParameters::load(&path)?;
    assert_eq!(params, restored, "tensors must round-trip bit for bit");
    println!("reloaded checkpoint compares bit-identical");

    for prompt in dataset.iter().take(3) {
        let a = sample_group(&params, prompt, 3, 1.0, 1, 9)?;
        let b = sample_group(&restored, prompt, 3, 1.0, 1, 9)?;
        assert_eq!(a, b);
        println!(
            "prompt {}: identical sampled groups, e.g. tokens {:?}",
            prompt.prompt_id, a.samples[0].tokens
        );
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
