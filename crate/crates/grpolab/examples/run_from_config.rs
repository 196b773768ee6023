//! Drives a full config-file run through the same entry point the
//! `grpolab run` command uses, then inspects the files it wrote.
//!
//! ```text
//! cargo run --release --example run_from_config
//! ```

use grpolab::cli::cmd_run;

const SPEC: &str = r#"
[task]
kind = "controlled_difficulty"
success_probability = 0.25
vocab_size = 8
dataset_size = 4
seed = 5

[policy]
max_output_len = 1
embed_dim = 6

[replay]
kind = "variance_driven"

[advantage]
normalizer = "grpo"
grouping = "split"

[objective]
clip_epsilon = 0.2

[train]
epochs = 6
batch_size = 4
g_on = 6
g_off = 4
e_off = 2
learning_rate = 0.02
seed = 0

[run]
seeds = [0, 1, 2]
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("grpolab_run_example");
    std::fs::create_dir_all(&dir)?;
    let spec_path = dir.join("spec.toml");
    std::fs::write(&spec_path, SPEC)?;

    let out = dir.join("out");
    let summary = cmd_run(&spec_path, Some(&out), None)?;

    println!("outputs in {}:", out.display());
    let mut names: Vec<String> = std::fs::read_dir(&out)?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in names {
        println!("  {name}");
    }

    println!("\nseed  steps  effective  final accuracy");
    for run in &summary.runs {
        println!(
            "{:>4} {:>6} {:>9.1}% {:>15.3}",
            run.seed,
            run.steps,
            100.0 * run.effective_step_pct,
            run.final_train_accuracy
        );
    }

    let csv = std::fs::read_to_string(out.join("metrics_0.csv"))?;
    println!("\nfirst rows of metrics_0.csv:");
    for line in csv.lines().take(4) {
        println!("  {line}");
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
