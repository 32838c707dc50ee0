//! End-to-end acceptance gate: ten numbered criteria, one PASS/FAIL line
//! each, nonzero exit if any fails.
//!
//! Run all criteria with `cargo test -p kova --test acceptance`; pass
//! criterion numbers as arguments to run a subset (`-- 4 9`). The heavy
//! training comparisons (criteria 7 and 8) dominate the runtime; everything
//! else finishes in about a minute combined.

use kova::env::{chain_exact_value, ChainMdpSpec, MazeSpec};
use kova::ktd::{ktd_step, KtdConfig};
use kova::linalg::{min_eigenvalue, min_eigenvalue_exceeds, SpdMatrix};
use kova::model::{ModelInput, Nonlinearity, ValueModel};
use kova::optimizer::{
    kova_step, EvolutionNoise, FilterState, KovaConfig, NoiseSchedule, ObservationBatch,
    ObservationNoise,
};
use kova::targets::{TargetSpec, Transition};
use kova::trainer::{
    run_double_q, run_policy_eval, MazeTrainConfig, OptimizerChoice, PolicyEvalConfig,
};
use kova::verify;
use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// One criterion: returns pass/fail plus a one-line account of what it
/// measured.
type Criterion = fn() -> (bool, String);

struct Outcome {
    number: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
}

impl Outcome {
    fn render(&self) -> String {
        format!(
            "{} criterion {} — {}: {} ({:.1} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.number,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn main() {
    // Must run before the first matrix product; re-executes the process once
    // when a wider BLAS kernel is available than the one auto-detected.
    kova::linalg::tune_blas_for_host();

    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let runs: Vec<(usize, &'static str, Criterion)> = vec![
        (1, "gain-form equivalence", criterion_1),
        (2, "linear-Gaussian posterior exactness", criterion_2),
        (3, "filter/squared-error objective equality", criterion_3),
        (4, "covariance positive semidefiniteness", criterion_4),
        (5, "Jacobian finite-difference agreement", criterion_5),
        (
            6,
            "unscented/Jacobian filter coincidence and evaluation accounting",
            criterion_6,
        ),
        (
            7,
            "4x4 maze: filter solves, sigma-point baseline lags",
            criterion_7,
        ),
        (8, "10x10 maze: filter at least matches Adam", criterion_8),
        (9, "chain policy-evaluation accuracy", criterion_9),
        (
            10,
            "continuous-control benchmarks out of scope",
            criterion_10,
        ),
    ];

    let mut all_passed = true;
    for (number, name, run) in runs {
        if !wanted.is_empty() && !wanted.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let (passed, detail) = run();
        let outcome = Outcome {
            number,
            name,
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        };
        println!("{}", outcome.render());
        all_passed &= outcome.passed;
    }
    std::process::exit(if all_passed { 0 } else { 1 });
}

/// Summarizes one verification suite into (passed, worst-case detail), also
/// enforcing a wall-clock budget.
fn suite_outcome(suite: &str, budget_s: f64) -> (bool, String) {
    let start = Instant::now();
    let reports = match verify::run_suite(suite).expect("suite name is known") {
        Ok(reports) => reports,
        Err(e) => return (false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let passed = reports.iter().all(|r| r.passed()) && elapsed <= budget_s;
    let detail = reports
        .iter()
        .flat_map(|r| r.checks.iter())
        .map(|c| {
            format!(
                "{} max error {:.2e} vs tolerance {:.0e} over {} cases",
                c.name, c.max_error, c.tolerance, c.cases
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    (
        passed,
        format!("{detail}; budget {budget_s} s, used {elapsed:.1} s"),
    )
}

fn criterion_1() -> (bool, String) {
    suite_outcome("gain-identity", 10.0)
}

fn criterion_2() -> (bool, String) {
    suite_outcome("linear-gaussian", 5.0)
}

fn criterion_3() -> (bool, String) {
    suite_outcome("objective-equality", 5.0)
}

/// 1,000 filter steps on an MLP with d ≈ 500: after every step the posterior
/// covariance must stay bitwise symmetric with min eigenvalue above
/// −1e-8·(trace/d), certified by an unjittered Cholesky of the shifted
/// matrix.
fn criterion_4() -> (bool, String) {
    let budget_s = 60.0;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = ValueModel::mlp(15, &[30], Nonlinearity::Tanh, 1).expect("valid architecture");
    let d = model.param_count();
    let cfg = KovaConfig::default();
    let mut state =
        FilterState::from_initial(model.init_parameters(4), &cfg).expect("square prior");

    let n = 16;
    let steps = 1000;
    let mut worst_margin = f64::INFINITY; // min over steps of (floor-certified gap)
    for step in 0..steps {
        let inputs: Vec<ModelInput> = (0..n)
            .map(|_| ModelInput::state(Array1::from_shape_fn(15, |_| rng.gen_range(-1.0..1.0))))
            .collect();
        let targets = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let batch = ObservationBatch::at_parameters(&model, state.theta(), inputs, targets)
            .expect("finite batch");
        state = match kova_step(&state, &batch, &cfg) {
            Ok(next) => next,
            Err(e) => return (false, format!("step {step} failed: {e}")),
        };

        let p = state.covariance();
        let arr = p.as_array();
        for i in 0..d {
            for j in (i + 1)..d {
                if arr[[i, j]].to_bits() != arr[[j, i]].to_bits() {
                    return (
                        false,
                        format!("step {step}: covariance not bitwise symmetric at ({i}, {j})"),
                    );
                }
            }
        }
        let floor = -1e-8 * p.trace() / d as f64;
        match min_eigenvalue_exceeds(arr, floor) {
            Ok(true) => worst_margin = worst_margin.min(-floor),
            Ok(false) => {
                let measured = min_eigenvalue(p)
                    .map(|v| format!("{v:.3e}"))
                    .unwrap_or_else(|e| format!("unmeasurable ({e})"));
                return (
                    false,
                    format!("step {step}: min eigenvalue {measured} below floor {floor:.3e}"),
                );
            }
            Err(e) => return (false, format!("step {step}: certificate failed: {e}")),
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    (
        elapsed <= budget_s,
        format!(
            "{steps} steps at d = {d}: covariance bitwise symmetric, min eigenvalue certified above \
             -1e-8·trace/d throughout (tightest floor {worst_margin:.2e}); budget {budget_s} s, used {elapsed:.1} s"
        ),
    )
}

fn criterion_5() -> (bool, String) {
    suite_outcome("jacobian", 30.0)
}

/// Linear Q-model stream at γ = 0: the sigma-point filter and the Jacobian
/// filter must walk identical trajectories (mean and covariance within
/// 1e-8), while their per-step model-evaluation counters report exactly
/// 2(2d+1) versus 2.
fn criterion_6() -> (bool, String) {
    let budget_s = 30.0;
    let start = Instant::now();
    let model = ValueModel::mlp(3, &[], Nonlinearity::Relu, 4).expect("valid architecture");
    let theta0 = model.init_parameters(6);
    let d = model.param_count();
    let gamma = 0.0;

    let ktd_cfg = KtdConfig {
        eta: 0.0,
        initial_covariance_scale: 10.0,
        observation_noise: 1.0,
        ..KtdConfig::default()
    };
    let kova_cfg = KovaConfig::new(
        1.0,
        10.0,
        NoiseSchedule::new(EvolutionNoise::Zero, ObservationNoise::FixedDiagonal(1.0))
            .expect("valid noise"),
    )
    .expect("valid config");

    let mut ktd_state = FilterState::new(theta0.clone(), SpdMatrix::scaled_identity(d, 10.0))
        .expect("matching dims");
    let mut kova_state = FilterState::from_initial(theta0, &kova_cfg).expect("square prior");

    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut ktd_evals = 0u64;
    let mut kova_evals = 0u64;
    let mut max_theta_gap = 0.0f64;
    let mut max_cov_gap = 0.0f64;
    let steps = 100;
    for step in 0..steps {
        let tr = Transition {
            state: vec![
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ],
            action: rng.gen_range(0..4),
            reward: rng.gen_range(-1.0..1.0),
            next_state: vec![
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ],
            terminal: false,
        };

        let (next, evals) = match ktd_step(&ktd_state, &tr, &model, gamma, &ktd_cfg) {
            Ok(v) => v,
            Err(e) => return (false, format!("sigma-point step {step} failed: {e}")),
        };
        if evals != 2 * (2 * d as u64 + 1) {
            return (
                false,
                format!(
                    "sigma-point step {step} reported {evals} evaluations, expected {}",
                    2 * (2 * d as u64 + 1)
                ),
            );
        }
        ktd_evals += evals;
        ktd_state = next;

        // Batch construction mirrors training: one sweep for predictions and
        // the Jacobian, one frozen-parameter sweep for the bootstrap label.
        let frozen = kova_state.theta().clone();
        let next_q = model
            .q_values(&frozen, &Array1::from(tr.next_state.clone()))
            .expect("finite evaluation");
        kova_evals += 1;
        let bootstrap = next_q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let y = tr.reward + gamma * bootstrap;
        let inputs = vec![ModelInput::state_action(
            Array1::from(tr.state.clone()),
            tr.action,
        )];
        let batch = ObservationBatch::at_parameters(
            &model,
            kova_state.theta(),
            inputs,
            ndarray::arr1(&[y]),
        )
        .expect("finite batch");
        kova_evals += 1;
        kova_state = match kova_step(&kova_state, &batch, &kova_cfg) {
            Ok(v) => v,
            Err(e) => return (false, format!("Jacobian-filter step {step} failed: {e}")),
        };

        let theta_gap = (ktd_state.theta() - kova_state.theta())
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        let cov_diff = ktd_state.covariance().as_array() - kova_state.covariance().as_array();
        let cov_gap = cov_diff.iter().map(|v| v * v).sum::<f64>().sqrt()
            / kova_state
                .covariance()
                .as_array()
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(1.0);
        max_theta_gap = max_theta_gap.max(theta_gap);
        max_cov_gap = max_cov_gap.max(cov_gap);
    }
    let expected_ktd = steps as u64 * 2 * (2 * d as u64 + 1);
    let expected_kova = steps as u64 * 2;
    let elapsed = start.elapsed().as_secs_f64();
    let passed = max_theta_gap <= 1e-8
        && max_cov_gap <= 1e-8
        && ktd_evals == expected_ktd
        && kova_evals == expected_kova
        && elapsed <= budget_s;
    (
        passed,
        format!(
            "{steps} steps at d = {d}: max mean gap {max_theta_gap:.2e}, max covariance gap \
             {max_cov_gap:.2e} (tolerance 1e-8); evaluations {ktd_evals} vs {kova_evals} \
             (expected {expected_ktd} vs {expected_kova}); budget {budget_s} s, used {elapsed:.1} s"
        ),
    )
}

/// Nearest-rank quantile on the sorted values, matching the summary files.
fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metrics"));
    values[((values.len() - 1) as f64 * 0.5).round() as usize]
}

fn final_success_median(
    maze: fn() -> MazeSpec,
    optimizer: &dyn Fn() -> OptimizerChoice,
    seeds: std::ops::Range<u64>,
    configure: &dyn Fn(&mut MazeTrainConfig),
) -> Result<f64, String> {
    let mut finals = Vec::new();
    for seed in seeds {
        let mut cfg = MazeTrainConfig::defaults(maze(), optimizer(), seed);
        configure(&mut cfg);
        let metrics = run_double_q(&cfg).map_err(|e| format!("seed {seed}: {e}"))?;
        finals.push(
            metrics
                .final_success_rate()
                .ok_or_else(|| format!("seed {seed}: no success rate recorded"))?,
        );
    }
    Ok(median(finals))
}

/// On the shipped 4x4 maze with the default training recipe, the filter's
/// last-50-episode success rate at the 5,000-step budget reaches ≥ 0.9
/// (median of 5 seeds) while the sigma-point baseline stays < 0.5.
fn criterion_7() -> (bool, String) {
    let kova = match final_success_median(
        MazeSpec::four_by_four,
        &|| OptimizerChoice::Kova(KovaConfig::default()),
        0..5,
        &|_| {},
    ) {
        Ok(v) => v,
        Err(e) => return (false, e),
    };
    let ktd = match final_success_median(
        MazeSpec::four_by_four,
        &|| OptimizerChoice::Ktd(KtdConfig::default()),
        0..5,
        &|_| {},
    ) {
        Ok(v) => v,
        Err(e) => return (false, e),
    };
    (
        kova >= 0.9 && ktd < 0.5,
        format!(
            "median final success over 5 seeds in 5,000 steps: filter {kova:.3} (needs >= 0.9), \
             sigma-point baseline {ktd:.3} (needs < 0.5)"
        ),
    )
}

/// On the shipped 10x10 maze (hidden width 32, 30,000 steps) the filter's
/// final-window success rate at η = 0.01 must at least match Adam at
/// lr = 3e-4, median of 3 seeds each.
fn criterion_8() -> (bool, String) {
    let widen = |cfg: &mut MazeTrainConfig| {
        cfg.hidden = vec![32];
        cfg.total_timesteps = 30_000;
    };
    let kova = match final_success_median(
        MazeSpec::ten_by_ten,
        &|| OptimizerChoice::Kova(KovaConfig::default()),
        0..3,
        &widen,
    ) {
        Ok(v) => v,
        Err(e) => return (false, e),
    };
    let adam = match final_success_median(
        MazeSpec::ten_by_ten,
        &|| OptimizerChoice::Adam {
            lr: 3e-4,
            schedule: kova::baselines::LrSchedule::Constant,
        },
        0..3,
        &widen,
    ) {
        Ok(v) => v,
        Err(e) => return (false, e),
    };
    (
        kova >= adam,
        format!(
            "median final success over 3 seeds in 30,000 steps: filter {kova:.3}, Adam {adam:.3} \
             (filter must be >= Adam)"
        ),
    )
}

/// Tabular state values on a 6-state chain under a fixed policy: the filter
/// with 1-step bootstrap targets must come within 0.05 of the exact
/// linear-system solution (max over states) inside 20,000 samples.
fn criterion_9() -> (bool, String) {
    let budget_s = 60.0;
    let start = Instant::now();
    let gamma = 0.5;
    let chain = ChainMdpSpec::new(6, 0.1, vec![0.0, 0.3, -0.2, 0.5, 0.1, -0.4], gamma)
        .expect("valid chain");
    let policy = vec![[0.3, 0.7]; 6];
    let exact = chain_exact_value(&chain, &policy).expect("solvable chain");

    let cfg = PolicyEvalConfig {
        chain,
        policy,
        optimizer: OptimizerChoice::Kova(
            KovaConfig::new(
                1.0,
                1.0,
                NoiseSchedule::new(
                    EvolutionNoise::FadingMemory(0.01),
                    ObservationNoise::BatchSize,
                )
                .expect("valid noise"),
            )
            .expect("valid config"),
        ),
        target: TargetSpec::KStepV { gamma, k: 1 },
        batch_size: 8,
        episode_length: 12,
        total_samples: 20_000,
        target_update_period: 5,
        seed: 0,
    };
    let metrics = match run_policy_eval(&cfg) {
        Ok(m) => m,
        Err(e) => return (false, format!("run failed: {e}")),
    };
    let err = match metrics.final_value_error() {
        Some(v) => v,
        None => return (false, "no value error recorded".to_string()),
    };
    let elapsed = start.elapsed().as_secs_f64();
    (
        err <= 0.05 && elapsed <= budget_s,
        format!(
            "max state-value error {err:.4} vs exact solution {:?} after 20,000 samples \
             (tolerance 0.05); budget {budget_s} s, used {elapsed:.1} s",
            exact
                .iter()
                .map(|v| (v * 1e3).round() / 1e3)
                .collect::<Vec<_>>()
        ),
    )
}

/// Large-scale continuous-control benchmark results are intentionally not
/// reproduced at desk scale; criteria 1-9 stand in for them.
fn criterion_10() -> (bool, String) {
    (
        true,
        "physics-simulator continuous-control results are intentionally not reproduced at desk \
         scale; criteria 1-9 stand in for them (nothing to run)"
            .to_string(),
    )
}
