//! Command-line driver for the Kalman-filter value-optimization crate.
//!
//! Three commands:
//!
//! * `kova train --config PATH [--override KEY=VALUE]...` — run a configured
//!   maze experiment over its seed list, writing one metrics file per
//!   (seed × repetition) plus a quantile summary.
//! * `kova verify SUITE` — run a named verification suite (or `all`) and
//!   print one pass/fail line per check.
//! * `kova export-curves DIR` — condense a directory of metrics files into
//!   one CSV of per-timestep quantiles per algorithm.
//!
//! Exit codes: 0 success, 1 run or check failure, 2 usage/config error.
//!
//! Configs are TOML with a fully validated schema (unknown keys are
//! rejected). The `optimizer` key selects which optimizer table applies, so
//! `--override optimizer=adam` swaps optimizers without touching anything
//! else. Relative output directories resolve under `$KOVA_OUTPUT_ROOT` (or
//! the working directory when unset). Metrics files are JSON Lines named
//! `{algorithm}-s{seed}-r{repetition}.jsonl`; record fields appear in this
//! order: timestep, episodes, mean_episode_reward, success_rate,
//! value_error, mle_objective, ekf_objective, model_evaluations,
//! wall_clock_s.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use kova::baselines::LrSchedule;
use kova::env::{MazeSpec, StartPolicy, FOUR_BY_FOUR_LAYOUT, TEN_BY_TEN_LAYOUT};
use kova::ktd::KtdConfig;
use kova::model::Nonlinearity;
use kova::optimizer::{EvolutionNoise, KovaConfig, NoiseSchedule, ObservationNoise};
use kova::trainer::{
    read_metrics_jsonl, run_double_q, write_metrics_jsonl, ControlTarget, MazeTrainConfig,
    OptimizerChoice, RunMetrics,
};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "kova",
    version,
    about = "Kalman-filter value optimization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Train {
        /// Path to the experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path overrides applied before validation,
        /// e.g. --override optimizer=adam --override training.epsilon=0.2
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a verification suite and print per-check results.
    Verify {
        /// One of the documented suite names, or `all`.
        suite: String,
    },
    /// Summarize a directory of metrics files into a quantile CSV.
    ExportCurves {
        /// Directory holding `*.jsonl` metrics files.
        dir: PathBuf,
    },
}

/// Marker for problems the user must fix in their invocation or config;
/// mapped to exit code 2 (anything else nonzero is exit 1).
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn main() {
    // Before anything touches linear algebra and while still single-threaded.
    kova::linalg::tune_blas_for_host();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(if e.is::<UsageError>() { 2 } else { 1 });
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train { config, overrides } => cmd_train(&config, &overrides),
        Command::Verify { suite } => cmd_verify(&suite),
        Command::ExportCurves { dir } => cmd_export_curves(&dir),
    }
}

// --- Config schema -------------------------------------------------------------

fn default_repetitions() -> u32 {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    /// Output directory; relative paths resolve under `$KOVA_OUTPUT_ROOT`.
    #[serde(default)]
    output_dir: Option<String>,
    seeds: Vec<u64>,
    #[serde(default = "default_repetitions")]
    repetitions: u32,
    /// Which optimizer table applies: kova | adam | sgd | ktd.
    optimizer: String,
    maze: MazeSection,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    training: TrainingSection,
    #[serde(default)]
    kova: KovaSection,
    #[serde(default)]
    adam: AdamSection,
    #[serde(default)]
    sgd: SgdSection,
    #[serde(default)]
    ktd: KtdSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MazeSection {
    /// `4x4`, `10x10`, or a path to a layout file (`#` blocked, `.` free).
    layout: String,
    /// `fixed-top-left` or `random-free-cell`; named layouts have defaults.
    #[serde(default)]
    start: Option<String>,
    #[serde(default)]
    loss_threshold: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    hidden: Vec<usize>,
    nonlinearity: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            nonlinearity: "relu".to_string(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainingSection {
    /// `double-q` or `dqn-max`.
    target: String,
    batch_size: usize,
    replay_capacity: usize,
    target_update_period: u64,
    epsilon: f64,
    gamma: f64,
    total_timesteps: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            target: "double-q".to_string(),
            batch_size: 32,
            replay_capacity: 10_000,
            target_update_period: 200,
            epsilon: 0.1,
            gamma: 0.95,
            total_timesteps: 5_000,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct KovaSection {
    learning_rate: f64,
    initial_covariance_scale: f64,
    /// `zero`, `fixed-diagonal`, or `fading-memory`.
    evolution_noise: String,
    /// Fading-memory coefficient (when `evolution_noise = "fading-memory"`).
    eta: f64,
    /// Per-parameter evolution variance (when `evolution_noise = "fixed-diagonal"`).
    sigma2: f64,
    /// `batch-size`, `fixed-diagonal`, or `custom-diagonal`.
    observation_noise: String,
    /// Per-sample observation variance (when `observation_noise = "fixed-diagonal"`).
    observation_sigma2: f64,
    /// Per-sample weights (when `observation_noise = "custom-diagonal"`).
    observation_weights: Option<Vec<f64>>,
    /// Bounded-uncertainty guard on covariance diagonal entries.
    covariance_cap: f64,
}

impl Default for KovaSection {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            initial_covariance_scale: 1.0,
            evolution_noise: "fading-memory".to_string(),
            eta: 0.01,
            sigma2: 0.0,
            observation_noise: "batch-size".to_string(),
            observation_sigma2: 1.0,
            observation_weights: None,
            covariance_cap: kova::optimizer::DEFAULT_COVARIANCE_CAP,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AdamSection {
    lr: f64,
    /// 0 keeps the rate constant; a positive value decays it linearly to
    /// zero at that optimizer step.
    decay_to_zero_at: u64,
}

impl Default for AdamSection {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            decay_to_zero_at: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SgdSection {
    lr: f64,
}

impl Default for SgdSection {
    fn default() -> Self {
        Self { lr: 0.01 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct KtdSection {
    learning_rate: f64,
    initial_covariance_scale: f64,
    observation_noise: f64,
    eta: f64,
    kappa: f64,
    covariance_cap: f64,
}

impl Default for KtdSection {
    fn default() -> Self {
        let d = KtdConfig::default();
        Self {
            learning_rate: d.learning_rate,
            initial_covariance_scale: d.initial_covariance_scale,
            observation_noise: d.observation_noise,
            eta: d.eta,
            kappa: d.kappa,
            covariance_cap: d.covariance_cap,
        }
    }
}

// --- Config -> trainer conversion ------------------------------------------------

fn parse_start(name: &str) -> Result<StartPolicy> {
    match name {
        "fixed-top-left" => Ok(StartPolicy::FixedTopLeft),
        "random-free-cell" => Ok(StartPolicy::RandomFreeCell),
        other => Err(usage(format!(
            "maze.start must be fixed-top-left or random-free-cell, got {other:?}"
        ))),
    }
}

fn build_maze(section: &MazeSection) -> Result<MazeSpec> {
    let start = section.start.as_deref().map(parse_start).transpose()?;
    let spec = match section.layout.as_str() {
        "4x4" => MazeSpec::parse(
            FOUR_BY_FOUR_LAYOUT,
            start.unwrap_or(StartPolicy::FixedTopLeft),
        ),
        "10x10" => MazeSpec::parse(
            TEN_BY_TEN_LAYOUT,
            start.unwrap_or(StartPolicy::RandomFreeCell),
        ),
        path => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read maze layout {path:?}: {e}")))?;
            MazeSpec::parse(&text, start.unwrap_or(StartPolicy::FixedTopLeft))
        }
    }
    .map_err(|e| usage(format!("maze layout: {e}")))?;
    match section.loss_threshold {
        Some(threshold) => spec
            .with_loss_threshold(threshold)
            .map_err(|e| usage(format!("maze.loss_threshold: {e}"))),
        None => Ok(spec),
    }
}

fn build_optimizer(config: &ExperimentConfig) -> Result<OptimizerChoice> {
    match config.optimizer.as_str() {
        "kova" => {
            let section = &config.kova;
            let evolution = match section.evolution_noise.as_str() {
                "zero" => EvolutionNoise::Zero,
                "fixed-diagonal" => EvolutionNoise::FixedDiagonal(section.sigma2),
                "fading-memory" => EvolutionNoise::FadingMemory(section.eta),
                other => {
                    return Err(usage(format!(
                        "kova.evolution_noise must be zero, fixed-diagonal, or fading-memory, got {other:?}"
                    )))
                }
            };
            let observation = match section.observation_noise.as_str() {
                "batch-size" => ObservationNoise::BatchSize,
                "fixed-diagonal" => ObservationNoise::FixedDiagonal(section.observation_sigma2),
                "custom-diagonal" => ObservationNoise::CustomDiagonal(
                    section.observation_weights.clone().ok_or_else(|| {
                        usage("kova.observation_weights required for custom-diagonal noise")
                    })?,
                ),
                other => {
                    return Err(usage(format!(
                        "kova.observation_noise must be batch-size, fixed-diagonal, or custom-diagonal, got {other:?}"
                    )))
                }
            };
            let noise = NoiseSchedule::new(evolution, observation)
                .map_err(|e| usage(format!("kova noise: {e}")))?;
            let cfg = KovaConfig::new(
                section.learning_rate,
                section.initial_covariance_scale,
                noise,
            )
            .and_then(|c| c.with_covariance_cap(section.covariance_cap))
            .map_err(|e| usage(format!("kova: {e}")))?;
            Ok(OptimizerChoice::Kova(cfg))
        }
        "adam" => {
            let section = &config.adam;
            let schedule = if section.decay_to_zero_at == 0 {
                LrSchedule::Constant
            } else {
                LrSchedule::LinearToZero {
                    total_steps: section.decay_to_zero_at,
                }
            };
            Ok(OptimizerChoice::Adam {
                lr: section.lr,
                schedule,
            })
        }
        "sgd" => Ok(OptimizerChoice::Sgd { lr: config.sgd.lr }),
        "ktd" => Ok(OptimizerChoice::Ktd(KtdConfig {
            learning_rate: config.ktd.learning_rate,
            initial_covariance_scale: config.ktd.initial_covariance_scale,
            observation_noise: config.ktd.observation_noise,
            eta: config.ktd.eta,
            kappa: config.ktd.kappa,
            covariance_cap: config.ktd.covariance_cap,
        })),
        other => Err(usage(format!(
            "optimizer must be kova, adam, sgd, or ktd, got {other:?}"
        ))),
    }
}

fn build_train_config(config: &ExperimentConfig, seed: u64) -> Result<MazeTrainConfig> {
    let nonlinearity = match config.model.nonlinearity.as_str() {
        "relu" => Nonlinearity::Relu,
        "tanh" => Nonlinearity::Tanh,
        other => {
            return Err(usage(format!(
                "model.nonlinearity must be relu or tanh, got {other:?}"
            )))
        }
    };
    let target = match config.training.target.as_str() {
        "double-q" => ControlTarget::DoubleQ,
        "dqn-max" => ControlTarget::DqnMax,
        other => {
            return Err(usage(format!(
                "training.target must be double-q or dqn-max, got {other:?}"
            )))
        }
    };
    Ok(MazeTrainConfig {
        maze: build_maze(&config.maze)?,
        hidden: config.model.hidden.clone(),
        nonlinearity,
        optimizer: build_optimizer(config)?,
        target,
        batch_size: config.training.batch_size,
        replay_capacity: config.training.replay_capacity,
        target_update_period: config.training.target_update_period,
        epsilon: config.training.epsilon,
        gamma: config.training.gamma,
        total_timesteps: config.training.total_timesteps,
        seed,
    })
}

// --- Overrides -----------------------------------------------------------------

/// Applies one `dotted.path=value` override to a parsed TOML document,
/// creating intermediate tables as needed. Values parse as TOML scalars
/// (numbers, booleans, arrays); anything that does not is taken as a string.
fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("override {spec:?} is not KEY=VALUE")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(usage(format!("override {spec:?} has an empty key")));
    }
    let value: toml::Value = match format!("x = {raw_value}").parse::<toml::Table>() {
        Ok(table) => table["x"].clone(),
        Err(_) => toml::Value::String(raw_value.trim().to_string()),
    };
    let mut node = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for segment in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| usage(format!("override {spec:?}: {segment:?} is not a table")))?;
        node = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| usage(format!("override {spec:?}: parent is not a table")))?;
    table.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

// --- train -----------------------------------------------------------------------

/// Per-repetition seed variation: repetition 0 reuses the seed unchanged,
/// later repetitions mix in a fixed odd multiplier so streams stay disjoint
/// but reproducible.
fn effective_seed(seed: u64, repetition: u32) -> u64 {
    seed ^ u64::from(repetition).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn output_root() -> PathBuf {
    std::env::var_os("KOVA_OUTPUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn cmd_train(config_path: &Path, overrides: &[String]) -> Result<i32> {
    let text = fs::read_to_string(config_path).map_err(|e| {
        usage(format!(
            "cannot read config file {}: {e}",
            config_path.display()
        ))
    })?;
    let mut doc: toml::Value = text
        .parse()
        .map_err(|e| usage(format!("config {}: {e}", config_path.display())))?;
    for spec in overrides {
        apply_override(&mut doc, spec)?;
    }
    let config: ExperimentConfig = doc
        .try_into()
        .map_err(|e| usage(format!("config {}: {e}", config_path.display())))?;
    if config.seeds.is_empty() {
        return Err(usage("config needs at least one seed"));
    }

    let out_dir = match &config.output_dir {
        Some(dir) if Path::new(dir).is_absolute() => PathBuf::from(dir),
        Some(dir) => output_root().join(dir),
        None => output_root(),
    };
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;

    let algorithm = build_optimizer(&config)?.name().to_string();
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        for rep in 0..config.repetitions {
            let train_cfg = build_train_config(&config, effective_seed(seed, rep))?;
            let metrics = run_double_q(&train_cfg)
                .with_context(|| format!("run failed (seed {seed}, repetition {rep})"))?;
            let file = out_dir.join(format!("{algorithm}-s{seed}-r{rep}.jsonl"));
            write_metrics_jsonl(&file, &metrics)?;
            println!(
                "wrote {} ({} records, final success rate {})",
                file.display(),
                metrics.records.len(),
                metrics
                    .final_success_rate()
                    .map_or("n/a".to_string(), |v| format!("{v:.3}")),
            );
            runs.push(metrics);
        }
    }

    let summary_path = out_dir.join("summary.csv");
    let mut grouped = BTreeMap::new();
    grouped.insert(algorithm, runs);
    write_summary_csv(&summary_path, &grouped)?;
    println!("wrote {}", summary_path.display());
    Ok(0)
}

// --- verify ------------------------------------------------------------------------

fn cmd_verify(suite: &str) -> Result<i32> {
    match kova::verify::run_suite(suite) {
        None => Err(usage(format!(
            "unknown suite {suite:?}; available: {}",
            kova::verify::SUITE_NAMES.join(", ")
        ))),
        Some(Err(e)) => Err(anyhow!(e).context(format!("suite {suite} failed to run"))),
        Some(Ok(reports)) => {
            let mut all_passed = true;
            for report in &reports {
                print!("{}", report.render());
                all_passed &= report.passed();
            }
            Ok(if all_passed { 0 } else { 1 })
        }
    }
}

// --- export-curves ------------------------------------------------------------------

/// The per-record value charted for a run: success rate for control runs
/// (0 until the first episode completes), value error for evaluation runs,
/// the squared-error objective otherwise.
fn curve_value(record: &kova::trainer::MetricsRecord) -> f64 {
    record
        .success_rate
        .or(record.value_error)
        .unwrap_or(record.mle_objective)
}

fn run_charts_success(runs: &[RunMetrics]) -> bool {
    runs.iter()
        .flat_map(|r| &r.records)
        .any(|r| r.success_rate.is_some())
}

/// Nearest-rank quantile on a sorted slice (index `round(q·(n−1))`).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn write_summary_csv(path: &Path, grouped: &BTreeMap<String, Vec<RunMetrics>>) -> Result<()> {
    let mut out = String::from("algorithm,timestep,median,p25,p75\n");
    for (algorithm, runs) in grouped {
        let charts_success = run_charts_success(runs);
        // timestep -> values across runs (BTreeMap keeps timesteps sorted).
        let mut by_timestep: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for run in runs {
            for record in &run.records {
                let value = if charts_success {
                    record.success_rate.unwrap_or(0.0)
                } else {
                    curve_value(record)
                };
                by_timestep.entry(record.timestep).or_default().push(value);
            }
        }
        for (timestep, mut values) in by_timestep {
            values.sort_by(|a, b| a.total_cmp(b));
            out.push_str(&format!(
                "{algorithm},{timestep},{},{},{}\n",
                quantile(&values, 0.5),
                quantile(&values, 0.25),
                quantile(&values, 0.75),
            ));
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Algorithm name from a metrics filename `{algorithm}-s{seed}-r{rep}.jsonl`;
/// files outside the convention group under their whole stem.
fn algorithm_of(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match stem.rfind("-s") {
        Some(pos) => stem[..pos].to_string(),
        None => stem,
    }
}

fn cmd_export_curves(dir: &Path) -> Result<i32> {
    let mut grouped: BTreeMap<String, Vec<RunMetrics>> = BTreeMap::new();
    let entries =
        fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
            continue;
        }
        let metrics = read_metrics_jsonl(&path)
            .with_context(|| format!("reading metrics {}", path.display()))?;
        grouped
            .entry(algorithm_of(&path))
            .or_default()
            .push(metrics);
    }
    if grouped.values().all(|runs| runs.is_empty()) || grouped.is_empty() {
        bail!("no metrics files (*.jsonl) found in {}", dir.display());
    }
    let out = dir.join("curves.csv");
    write_summary_csv(&out, &grouped)?;
    println!("wrote {}", out.display());
    Ok(0)
}
