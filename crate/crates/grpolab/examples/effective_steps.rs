//! Compares the fraction of effective updates across replay strategies on
//! a low-success-rate task, using the library API directly (a mini sweep).
//!
//! A prompt update is "ineffective" when every advantage is zero, which
//! on binary rewards happens exactly when the sampled group is uniform:
//! all failures or all successes. Replay reduces that waste by pairing
//! each on-policy group with stored contrast.
//!
//! ```text
//! cargo run --release --example effective_steps
//! ```

use grpolab::objective::ObjectiveConfig;
use grpolab::replay::{ReplayBuffer, ReplayStrategy};
use grpolab::tasks::{TaskKind, TaskSpec};
use grpolab::trainer::{Algorithm, EffectiveAccounting, LrSchedule, OptimizerKind};
use grpolab::{train, AdvantageMode, PolicyConfig, PolicyParameters, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let task = TaskSpec {
        kind: TaskKind::ControlledDifficulty {
            success_probability: 0.1,
            vocab_size: 10,
        },
        dataset_size: 6,
        seed: 11,
    };
    let dataset = task.generate_dataset()?;
    let policy_config = PolicyConfig {
        vocab_size: task.min_vocab_size(),
        max_output_len: 1,
        prompt_feature_dim: task.feature_dim(),
        embed_dim: 6,
        hidden_dim: 0,
        init_scale: 0.05,
        seed: 2,
    };
    let config = TrainConfig {
        epochs: 25,
        batch_size: 6,
        g_on: 6,
        g_off: 6,
        mu: 1,
        e_off: 2,
        learning_rate: 0.01,
        lr_schedule: LrSchedule::Constant,
        optimizer: OptimizerKind::default(),
        algorithm: Algorithm::Repo,
        temperature: 1.0,
        capacity_per_prompt: None,
        parallel_rollout: true,
        record_wall_clock: false,
        effective_accounting: EffectiveAccounting::PerPrompt,
        seed: 4,
    };

    let strategies = [
        ReplayStrategy::None,
        ReplayStrategy::Random { rng_seed: 0 },
        ReplayStrategy::FullScope,
        ReplayStrategy::Recency { k: None },
        ReplayStrategy::RewardOriented,
        ReplayStrategy::VarianceDriven,
    ];
    println!("strategy           effective updates   final train accuracy");
    for strategy in &strategies {
        let params = PolicyParameters::init(&policy_config)?;
        let mut buffer = ReplayBuffer::new();
        let (_, metrics) = train(
            &config,
            AdvantageMode::default(),
            &ObjectiveConfig::default(),
            strategy,
            &dataset,
            params,
            &mut buffer,
        )?;
        println!(
            "{:<18} {:>16.1}% {:>21.3}",
            grpolab::cli::strategy_label(strategy),
            100.0 * metrics.effective_step_pct,
            metrics.final_train_accuracy
        );
    }
    Ok(())
}
