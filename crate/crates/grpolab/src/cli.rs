//! Config-file driven entry points: `run` executes one training run per
//! seed, `sweep` compares replay variants along one axis.
//!
//! A run spec is a TOML file with sections `[task]`, `[policy]`,
//! `[objective]`, `[advantage]`, `[replay]`, `[train]`, `[run]`, and an
//! optional `[sweep]`. The policy's feature dimension always comes from
//! the task, and its vocabulary defaults to the smallest one the task can
//! express; everything else is explicit.
//!
//! Output-directory precedence: `--out` flag, then the `GRPOLAB_OUT_DIR`
//! environment variable, then `[run].out_dir`.

use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advantage::AdvantageMode;
use crate::objective::ObjectiveConfig;
use crate::policy::{PolicyConfig, PolicyParameters};
use crate::replay::{ReplayBuffer, ReplayStrategy};
use crate::tasks::TaskSpec;
use crate::trainer::{train, RunMetrics, TimingSummary, TrainConfig, TrainError};

/// Environment variable that overrides `[run].out_dir` (but loses to
/// the `--out` flag).
pub const OUT_DIR_ENV: &str = "GRPOLAB_OUT_DIR";

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config file not found: {0}")]
    MissingConfig(PathBuf),
    #[error("could not read {path}: {source}")]
    ReadConfig {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("could not parse {path}: {source}")]
    ParseConfig {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("invalid run spec: {0}")]
    InvalidSpec(String),
    #[error("sweep axis {axis} has no values; fill in [sweep].{key}")]
    EmptyAxis { axis: &'static str, key: &'static str },
    #[error("could not write {path}: {source}")]
    WriteOutput {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Task(#[from] crate::tasks::TaskError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `[policy]` section: architecture knobs; the feature dimension is
/// derived from the task and the vocabulary defaults to the task minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySection {
    #[serde(default)]
    pub vocab_size: Option<usize>,
    pub max_output_len: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    0.1
}

/// `[run]` section: where output goes and which seeds to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: default_out_dir(),
            seeds: default_seeds(),
        }
    }
}

/// `[sweep]` section: the candidate values for each sweep axis.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    #[serde(default)]
    pub strategies: Vec<ReplayStrategy>,
    #[serde(default)]
    pub g_off: Vec<usize>,
}

/// A full parsed run spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub task: TaskSpec,
    pub policy: PolicySection,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub advantage: AdvantageMode,
    #[serde(default)]
    pub replay: ReplayStrategy,
    pub train: TrainConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

impl RunSpec {
    /// Reads and parses a spec file, reporting the path in every failure.
    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::MissingConfig(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|source| CliError::ReadConfig {
            path: path.to_path_buf(),
            source,
        })?;
        let spec: RunSpec =
            toml::from_str(&text).map_err(|source| CliError::ParseConfig {
                path: path.to_path_buf(),
                source: Box::new(source),
            })?;
        spec.task.validate()?;
        Ok(spec)
    }

    /// The policy configuration with task-derived fields filled in.
    /// The seed is substituted per run.
    pub fn policy_config(&self, seed: u64) -> CliResult<PolicyConfig> {
        let min_vocab = self.task.min_vocab_size();
        let vocab_size = self.policy.vocab_size.unwrap_or(min_vocab);
        if vocab_size < min_vocab {
            return Err(CliError::InvalidSpec(format!(
                "vocab_size {vocab_size} cannot express the task; it needs at least {min_vocab}"
            )));
        }
        let config = PolicyConfig {
            vocab_size,
            max_output_len: self.policy.max_output_len,
            prompt_feature_dim: self.task.feature_dim(),
            embed_dim: self.policy.embed_dim,
            hidden_dim: self.policy.hidden_dim,
            init_scale: self.policy.init_scale,
            seed,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Applies the output-directory precedence: flag, then environment,
/// then config.
pub fn resolve_out_dir(
    flag: Option<&Path>,
    env_value: Option<std::ffi::OsString>,
    config_value: &Path,
) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    if let Some(dir) = env_value {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    config_value.to_path_buf()
}

/// Per-seed scalars reported in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub steps: usize,
    pub effective_step_pct: f64,
    pub final_train_accuracy: f64,
    pub advantage_union_mean_max_abs: f64,
    pub timing: TimingSummary,
}

impl SeedSummary {
    fn new(seed: u64, metrics: &RunMetrics) -> Self {
        Self {
            seed,
            steps: metrics.records.len(),
            effective_step_pct: metrics.effective_step_pct,
            final_train_accuracy: metrics.final_train_accuracy,
            advantage_union_mean_max_abs: metrics.advantage_union_mean_max_abs,
            timing: metrics.timing.clone(),
        }
    }
}

/// What `summary.json` contains: the fully-resolved configuration (every
/// default and override applied) plus per-seed results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: TaskSpec,
    pub policy: PolicyConfig,
    pub objective: ObjectiveConfig,
    pub advantage: AdvantageMode,
    pub replay: ReplayStrategy,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedSummary>,
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut f = fs::File::create(path).map_err(|source| CliError::WriteOutput {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(bytes).map_err(|source| CliError::WriteOutput {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Trains one seed of a spec and returns the final policy with its
/// metrics. The seed replaces both the policy-init seed and the
/// training-stream seed, so one number fixes the whole run.
pub fn run_one_seed(
    spec: &RunSpec,
    strategy: &ReplayStrategy,
    train_config: &TrainConfig,
    seed: u64,
) -> CliResult<(PolicyParameters, RunMetrics)> {
    let dataset = spec.task.generate_dataset()?;
    let params = PolicyParameters::init(&spec.policy_config(seed)?)?;
    let config = TrainConfig {
        seed,
        ..train_config.clone()
    };
    let mut buffer = match config.capacity_per_prompt {
        Some(c) => ReplayBuffer::with_capacity_per_prompt(c),
        None => ReplayBuffer::new(),
    };
    let (params, metrics) = train(
        &config,
        spec.advantage,
        &spec.objective,
        strategy,
        &dataset,
        params,
        &mut buffer,
    )?;
    Ok((params, metrics))
}

/// The `run` command: one training run per seed, writing
/// `metrics_<seed>.csv` and `policy_<seed>.grpl` per seed plus a shared
/// `summary.json`. Returns the summary.
pub fn cmd_run(
    config_path: &Path,
    out_flag: Option<&Path>,
    seed_flag: Option<u64>,
) -> CliResult<RunSummary> {
    let spec = RunSpec::load(config_path)?;
    let out_dir = resolve_out_dir(
        out_flag,
        std::env::var_os(OUT_DIR_ENV),
        &spec.run.out_dir,
    );
    fs::create_dir_all(&out_dir).map_err(|source| CliError::WriteOutput {
        path: out_dir.clone(),
        source,
    })?;
    let seeds = match seed_flag {
        Some(s) => vec![s],
        None => spec.run.seeds.clone(),
    };
    if seeds.is_empty() {
        return Err(CliError::InvalidSpec(
            "[run].seeds is empty and no --seed was given".into(),
        ));
    }

    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let (params, metrics) = run_one_seed(&spec, &spec.replay, &spec.train, seed)?;
        let csv_path = out_dir.join(format!("metrics_{seed}.csv"));
        write_file(&csv_path, metrics.csv_string().as_bytes())?;
        params.save(&out_dir.join(format!("policy_{seed}.grpl")))?;
        runs.push(SeedSummary::new(seed, &metrics));
    }

    let summary = RunSummary {
        task: spec.task.clone(),
        policy: spec.policy_config(seeds[0])?,
        objective: spec.objective.clone(),
        advantage: spec.advantage,
        replay: spec.replay.clone(),
        train: spec.train.clone(),
        out_dir: out_dir.clone(),
        seeds,
        runs,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    write_file(&out_dir.join("summary.json"), json.as_bytes())?;
    Ok(summary)
}

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Replay selection strategy, from `[sweep].strategies`.
    Strategy,
    /// Off-policy group size, from `[sweep].g_off`.
    GOff,
}

/// A short, filename-safe label for a strategy variant.
pub fn strategy_label(strategy: &ReplayStrategy) -> String {
    match strategy {
        ReplayStrategy::None => "none".into(),
        ReplayStrategy::Random { rng_seed } => format!("random_s{rng_seed}"),
        ReplayStrategy::FullScope => "full_scope".into(),
        ReplayStrategy::Recency { k: None } => "recency".into(),
        ReplayStrategy::Recency { k: Some(k) } => format!("recency_k{k}"),
        ReplayStrategy::RewardOriented => "reward_oriented".into(),
        ReplayStrategy::VarianceDriven => "variance_driven".into(),
    }
}

/// Header of `sweep.csv`.
pub const SWEEP_CSV_HEADER: &str =
    "axis,variant,seed,effective_step_pct,final_train_accuracy,advantage_union_mean_max_abs";

/// One `sweep.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: &'static str,
    pub variant: String,
    pub seed: u64,
    pub effective_step_pct: f64,
    pub final_train_accuracy: f64,
    pub advantage_union_mean_max_abs: f64,
}

impl SweepRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.axis,
            self.variant,
            self.seed,
            self.effective_step_pct,
            self.final_train_accuracy,
            self.advantage_union_mean_max_abs
        )
    }
}

/// The `sweep` command: trains every (variant, seed) pair along one axis
/// and writes `sweep.csv`. Returns the rows.
pub fn cmd_sweep(
    config_path: &Path,
    axis: SweepAxis,
    out_flag: Option<&Path>,
) -> CliResult<Vec<SweepRow>> {
    let spec = RunSpec::load(config_path)?;
    let out_dir = resolve_out_dir(
        out_flag,
        std::env::var_os(OUT_DIR_ENV),
        &spec.run.out_dir,
    );
    fs::create_dir_all(&out_dir).map_err(|source| CliError::WriteOutput {
        path: out_dir.clone(),
        source,
    })?;
    let sweep = spec.sweep.clone().unwrap_or_default();
    let seeds = &spec.run.seeds;
    if seeds.is_empty() {
        return Err(CliError::InvalidSpec("[run].seeds is empty".into()));
    }

    let mut rows = Vec::new();
    match axis {
        SweepAxis::Strategy => {
            if sweep.strategies.is_empty() {
                return Err(CliError::EmptyAxis {
                    axis: "strategy",
                    key: "strategies",
                });
            }
            for strategy in &sweep.strategies {
                for &seed in seeds {
                    let (_, metrics) = run_one_seed(&spec, strategy, &spec.train, seed)?;
                    rows.push(SweepRow {
                        axis: "strategy",
                        variant: strategy_label(strategy),
                        seed,
                        effective_step_pct: metrics.effective_step_pct,
                        final_train_accuracy: metrics.final_train_accuracy,
                        advantage_union_mean_max_abs: metrics.advantage_union_mean_max_abs,
                    });
                }
            }
        }
        SweepAxis::GOff => {
            if sweep.g_off.is_empty() {
                return Err(CliError::EmptyAxis {
                    axis: "g_off",
                    key: "g_off",
                });
            }
            for &g_off in &sweep.g_off {
                let config = TrainConfig {
                    g_off,
                    ..spec.train.clone()
                };
                for &seed in seeds {
                    let (_, metrics) = run_one_seed(&spec, &spec.replay, &config, seed)?;
                    rows.push(SweepRow {
                        axis: "g_off",
                        variant: g_off.to_string(),
                        seed,
                        effective_step_pct: metrics.effective_step_pct,
                        final_train_accuracy: metrics.final_train_accuracy,
                        advantage_union_mean_max_abs: metrics.advantage_union_mean_max_abs,
                    });
                }
            }
        }
    }

    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.csv_line());
        csv.push('\n');
    }
    write_file(&out_dir.join("sweep.csv"), csv.as_bytes())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::CSV_HEADER;

    const SPEC_TOML: &str = r#"
[task]
kind = "controlled_difficulty"
success_probability = 0.5
vocab_size = 6
dataset_size = 4
seed = 3

[policy]
max_output_len = 2
embed_dim = 4

[replay]
kind = "recency"

[train]
epochs = 2
batch_size = 2
g_on = 3
g_off = 2
e_off = 2
learning_rate = 0.01
seed = 0

[run]
seeds = [0, 1]

[sweep]
g_off = [1, 2]

[[sweep.strategies]]
kind = "recency"

[[sweep.strategies]]
kind = "variance_driven"
"#;

    fn write_spec(dir: &Path) -> PathBuf {
        let path = dir.join("spec.toml");
        fs::write(&path, SPEC_TOML).unwrap();
        path
    }

    #[test]
    fn spec_parses_with_defaults_applied() {
        let dir = tempfile::tempdir().unwrap();
        let spec = RunSpec::load(&write_spec(dir.path())).unwrap();
        assert_eq!(spec.policy.vocab_size, None);
        assert_eq!(spec.policy.hidden_dim, 0);
        assert_eq!(spec.run.seeds, vec![0, 1]);
        assert_eq!(spec.advantage, AdvantageMode::default());
        assert_eq!(spec.objective, ObjectiveConfig::default());
        let config = spec.policy_config(7).unwrap();
        assert_eq!(config.vocab_size, 6, "task minimum fills the default");
        assert_eq!(config.prompt_feature_dim, 4);
        assert_eq!(config.seed, 7);
        let sweep = spec.sweep.unwrap();
        assert_eq!(sweep.g_off, vec![1, 2]);
        assert_eq!(sweep.strategies.len(), 2);
    }

    #[test]
    fn missing_config_error_names_the_path() {
        let err = RunSpec::load(Path::new("/nonexistent/nope.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/nope.toml"));
    }

    #[test]
    fn parse_error_names_the_path_and_problem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "[task]\nkind = \"no_such_task\"\n").unwrap();
        let err = RunSpec::load(&path).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("bad.toml"), "{text}");
    }

    #[test]
    fn undersized_vocab_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let toml = SPEC_TOML.replace(
            "[policy]\nmax_output_len = 2",
            "[policy]\nvocab_size = 3\nmax_output_len = 2",
        );
        let path = dir.path().join("spec.toml");
        fs::write(&path, toml).unwrap();
        let spec = RunSpec::load(&path).unwrap();
        assert!(spec.policy_config(0).is_err());
    }

    #[test]
    fn out_dir_precedence_is_flag_env_config() {
        let config = Path::new("from_config");
        assert_eq!(
            resolve_out_dir(Some(Path::new("from_flag")), Some("from_env".into()), config),
            PathBuf::from("from_flag")
        );
        assert_eq!(
            resolve_out_dir(None, Some("from_env".into()), config),
            PathBuf::from("from_env")
        );
        assert_eq!(resolve_out_dir(None, None, config), PathBuf::from("from_config"));
        assert_eq!(
            resolve_out_dir(None, Some("".into()), config),
            PathBuf::from("from_config"),
            "empty env var is ignored"
        );
    }

    #[test]
    fn run_command_writes_csv_checkpoint_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let spec_path = write_spec(dir.path());
        let out = dir.path().join("out");
        let summary = cmd_run(&spec_path, Some(&out), None).unwrap();
        assert_eq!(summary.seeds, vec![0, 1]);
        assert_eq!(summary.runs.len(), 2);
        for seed in [0u64, 1] {
            let csv = fs::read_to_string(out.join(format!("metrics_{seed}.csv"))).unwrap();
            assert!(csv.starts_with(CSV_HEADER));
            assert_eq!(csv.lines().count(), 1 + 4);
            let params =
                PolicyParameters::load(&out.join(format!("policy_{seed}.grpl"))).unwrap();
            assert_eq!(params.config().seed, seed);
        }
        let json = fs::read_to_string(out.join("summary.json")).unwrap();
        let parsed: RunSummary = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, summary);
        assert_eq!(parsed.policy.prompt_feature_dim, 4);
        assert!(parsed.runs.iter().all(|r| r.timing.total_ns > 0));
    }

    #[test]
    fn seed_flag_narrows_to_one_run() {
        let dir = tempfile::tempdir().unwrap();
        let spec_path = write_spec(dir.path());
        let out = dir.path().join("out");
        let summary = cmd_run(&spec_path, Some(&out), Some(9)).unwrap();
        assert_eq!(summary.seeds, vec![9]);
        assert!(out.join("metrics_9.csv").exists());
        assert!(!out.join("metrics_0.csv").exists());
    }

    #[test]
    fn run_command_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let spec_path = write_spec(dir.path());
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        cmd_run(&spec_path, Some(&out_a), None).unwrap();
        cmd_run(&spec_path, Some(&out_b), None).unwrap();
        for seed in [0u64, 1] {
            let name = format!("metrics_{seed}.csv");
            let a = fs::read(out_a.join(&name)).unwrap();
            let b = fs::read(out_b.join(&name)).unwrap();
            assert_eq!(a, b, "repeated runs must produce identical bytes");
        }
    }

    #[test]
    fn sweep_strategy_axis_produces_one_row_per_variant_seed() {
        let dir = tempfile::tempdir().unwrap();
        let spec_path = write_spec(dir.path());
        let out = dir.path().join("sweep");
        let rows = cmd_sweep(&spec_path, SweepAxis::Strategy, Some(&out)).unwrap();
        assert_eq!(rows.len(), 4, "2 strategies x 2 seeds");
        let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
        assert!(csv.starts_with(SWEEP_CSV_HEADER));
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.contains("strategy,recency,0,"));
        assert!(csv.contains("strategy,variance_driven,1,"));
    }

    #[test]
    fn sweep_g_off_axis_varies_group_size() {
        let dir = tempfile::tempdir().unwrap();
        let spec_path = write_spec(dir.path());
        let out = dir.path().join("sweep");
        let rows = cmd_sweep(&spec_path, SweepAxis::GOff, Some(&out)).unwrap();
        assert_eq!(rows.len(), 4, "2 sizes x 2 seeds");
        assert!(rows.iter().any(|r| r.variant == "1"));
        assert!(rows.iter().any(|r| r.variant == "2"));
    }

    #[test]
    fn sweep_with_empty_axis_fails() {
        let dir = tempfile::tempdir().unwrap();
        let toml = SPEC_TOML
            .replace("g_off = [1, 2]\n", "")
            .replace("[[sweep.strategies]]\nkind = \"recency\"\n\n", "")
            .replace("[[sweep.strategies]]\nkind = \"variance_driven\"\n", "");
        let path = dir.path().join("spec.toml");
        fs::write(&path, toml).unwrap();
        let out = dir.path().join("out");
        assert!(matches!(
            cmd_sweep(&path, SweepAxis::Strategy, Some(&out)),
            Err(CliError::EmptyAxis { axis: "strategy", .. })
        ));
        assert!(matches!(
            cmd_sweep(&path, SweepAxis::GOff, Some(&out)),
            Err(CliError::EmptyAxis { axis: "g_off", .. })
        ));
    }

    #[test]
    fn strategy_labels_are_filename_safe() {
        for (strategy, label) in [
            (ReplayStrategy::None, "none"),
            (ReplayStrategy::Random { rng_seed: 3 }, "random_s3"),
            (ReplayStrategy::FullScope, "full_scope"),
            (ReplayStrategy::Recency { k: None }, "recency"),
            (ReplayStrategy::Recency { k: Some(4) }, "recency_k4"),
            (ReplayStrategy::RewardOriented, "reward_oriented"),
            (ReplayStrategy::VarianceDriven, "variance_driven"),
        ] {
            assert_eq!(strategy_label(&strategy), label);
        }
    }
}
