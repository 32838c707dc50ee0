//! Self-contained verification suites.
//!
//! Each suite checks a core computation against a reference computed by an
//! independent code path inside this module — dense Gauss–Jordan inversion
//! instead of Cholesky solves, finite differences instead of analytic
//! Jacobians, Bellman-equation residuals instead of the linear solver — so a
//! shared bug cannot cancel out. All randomness is seeded; every run of a
//! suite checks the same cases.
//!
//! The suites back both the `verify` command of the CLI and the automated
//! acceptance checks.

use crate::env::{chain_exact_value, ChainMdpSpec};
use crate::linalg::SpdMatrix;
use crate::model::{ModelInput, Nonlinearity, ValueModel};
use crate::optimizer::{
    build_observation_noise, ekf_objective, innovation_covariance, kalman_gain, kova_step,
    mle_objective, EvolutionNoise, FilterState, KovaConfig, KovaError, NoiseSchedule,
    ObservationBatch, ObservationNoise,
};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one named check: the largest error observed over its cases and
/// the tolerance it was held to.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error.is_finite() && self.max_error <= self.tolerance
    }

    /// One status line: `PASS name: max error 1.2e-10 <= 1e-8 (100 cases)`.
    pub fn render(&self) -> String {
        format!(
            "{} {}: max error {:.3e} {} {:.0e} ({} cases)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            if self.passed() { "<=" } else { ">" },
            self.tolerance,
            self.cases
        )
    }
}

/// All checks of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn render(&self) -> String {
        let mut out = format!("suite {}\n", self.suite);
        for check in &self.checks {
            out.push_str("  ");
            out.push_str(&check.render());
            out.push('\n');
        }
        out
    }
}

/// Names accepted by [`run_suite`], `"all"` last.
pub const SUITE_NAMES: [&str; 6] = [
    "gain-identity",
    "linear-gaussian",
    "objective-equality",
    "jacobian",
    "chain-oracle",
    "all",
];

/// Runs one suite by name (or every suite for `"all"`). `None` for a name
/// outside [`SUITE_NAMES`].
pub fn run_suite(name: &str) -> Option<Result<Vec<SuiteReport>, KovaError>> {
    let single = |r: Result<SuiteReport, KovaError>| Some(r.map(|s| vec![s]));
    match name {
        "gain-identity" => single(gain_identity_suite()),
        "linear-gaussian" => single(linear_gaussian_suite()),
        "objective-equality" => single(objective_equality_suite()),
        "jacobian" => single(jacobian_suite()),
        "chain-oracle" => single(chain_oracle_suite()),
        "all" => {
            let run = || -> Result<Vec<SuiteReport>, KovaError> {
                Ok(vec![
                    gain_identity_suite()?,
                    linear_gaussian_suite()?,
                    objective_equality_suite()?,
                    jacobian_suite()?,
                    chain_oracle_suite()?,
                ])
            };
            Some(run())
        }
        _ => None,
    }
}

// --- Reference helpers (independent code paths) -------------------------------

/// Gauss–Jordan inversion with partial pivoting. Deliberately not the
/// Cholesky machinery the production solves use.
fn gauss_inverse(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "square matrix required");
    let mut work = a.clone();
    let mut inv = Array2::eye(n);
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if work[[row, col]].abs() > work[[pivot, col]].abs() {
                pivot = row;
            }
        }
        assert!(work[[pivot, col]].abs() > 0.0, "singular reference matrix");
        if pivot != col {
            for j in 0..n {
                work.swap([col, j], [pivot, j]);
                inv.swap([col, j], [pivot, j]);
            }
        }
        let scale = work[[col, col]];
        for j in 0..n {
            work[[col, j]] /= scale;
            inv[[col, j]] /= scale;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = work[[row, col]];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                work[[row, j]] -= factor * work[[col, j]];
                inv[[row, j]] -= factor * inv[[col, j]];
            }
        }
    }
    inv
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn relative_frobenius(got: &Array2<f64>, want: &Array2<f64>) -> f64 {
    frobenius(&(got - want)) / frobenius(want).max(1.0)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn random_vector(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.gen_range(-1.0..1.0))
}

/// Well-conditioned random SPD matrix `A Aᵀ + d·I` (as a plain array so the
/// reference path never touches `SpdMatrix` validation).
fn random_spd_array(rng: &mut ChaCha8Rng, dim: usize) -> Array2<f64> {
    let a = random_matrix(rng, dim, dim);
    let mut m = a.dot(&a.t());
    for i in 0..dim {
        m[[i, i]] += dim as f64;
    }
    // Force bitwise symmetry.
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    m
}

// --- Suites -------------------------------------------------------------------

/// Compares the covariance-form gain `P J S⁻¹` (production path: Cholesky
/// solves against `S = JᵀPJ + P_n`) with the information-form gain
/// `(P⁻¹ + J P_n⁻¹ Jᵀ)⁻¹ J P_n⁻¹` computed by Gauss–Jordan inversion. The
/// two are algebraically equal; agreement certifies the solve machinery.
pub fn gain_identity_suite() -> Result<SuiteReport, KovaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cases = 100;
    let mut max_error: f64 = 0.0;
    for _ in 0..cases {
        let d = rng.gen_range(1..=50);
        let n = rng.gen_range(1..=10);
        let p_array = random_spd_array(&mut rng, d);
        let p = SpdMatrix::new(p_array.clone())?;
        let jac = random_matrix(&mut rng, d, n);
        let noise_diag: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        let mut p_n_array = Array2::zeros((n, n));
        for (i, v) in noise_diag.iter().enumerate() {
            p_n_array[[i, i]] = *v;
        }
        let p_n = SpdMatrix::new(p_n_array)?;

        let s = innovation_covariance(&p, &jac, &p_n)?;
        let gain = kalman_gain(&p, &jac, &s)?;

        // Reference: invert everything densely.
        let p_inv = gauss_inverse(&p_array);
        let mut j_rn_inv = jac.clone(); // J P_n⁻¹ for diagonal P_n
        for (col, v) in noise_diag.iter().enumerate() {
            for row in 0..d {
                j_rn_inv[[row, col]] /= v;
            }
        }
        let information = &p_inv + &j_rn_inv.dot(&jac.t());
        let reference = gauss_inverse(&information).dot(&j_rn_inv);

        max_error = max_error.max(relative_frobenius(&gain, &reference));
    }
    Ok(SuiteReport {
        suite: "gain-identity".to_string(),
        checks: vec![CheckResult {
            name: "covariance-form vs information-form gain".to_string(),
            cases,
            max_error,
            tolerance: 1e-8,
        }],
    })
}

/// Runs the filter on a linear model with undamped updates and zero evolution
/// noise over 20 sequential batches and compares mean and covariance against
/// the closed-form Gaussian posterior accumulated in information form.
pub fn linear_gaussian_suite() -> Result<SuiteReport, KovaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let d = 6;
    let n = 8;
    let batches = 20;
    let sigma2 = 0.7;
    let model = ValueModel::linear(d)?;

    let theta0 = random_vector(&mut rng, d);
    let prior_scale = 2.0;
    let cfg = KovaConfig::new(
        1.0,
        prior_scale,
        NoiseSchedule::new(
            EvolutionNoise::Zero,
            ObservationNoise::FixedDiagonal(sigma2),
        )?,
    )?;
    let mut state = FilterState::from_initial(theta0.clone(), &cfg)?;

    // Information-form accumulation: Λ = P⁻¹, b = P⁻¹ θ.
    let mut lambda = Array2::eye(d) / prior_scale;
    let mut b = &theta0 / prior_scale;

    let mut mean_error: f64 = 0.0;
    let mut cov_error: f64 = 0.0;
    for _ in 0..batches {
        let inputs: Vec<ModelInput> = (0..n)
            .map(|_| ModelInput::state(random_vector(&mut rng, d)))
            .collect();
        let targets = random_vector(&mut rng, n);

        // Reference update from the raw features, before the filter moves.
        let mut x = Array2::zeros((d, n));
        for (col, input) in inputs.iter().enumerate() {
            for row in 0..d {
                x[[row, col]] = input.features[row];
            }
        }
        lambda = &lambda + &(x.dot(&x.t()) / sigma2);
        b = &b + &(x.dot(&targets) / sigma2);
        let posterior_cov = gauss_inverse(&lambda);
        let posterior_mean = posterior_cov.dot(&b);

        let batch = ObservationBatch::at_parameters(&model, state.theta(), inputs, targets)?;
        state = kova_step(&state, &batch, &cfg)?;

        let mean_diff = (state.theta() - &posterior_mean)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let mean_norm = posterior_mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        mean_error = mean_error.max(mean_diff / mean_norm.max(1.0));
        cov_error = cov_error.max(relative_frobenius(
            state.covariance().as_array(),
            &posterior_cov,
        ));
    }
    Ok(SuiteReport {
        suite: "linear-gaussian".to_string(),
        checks: vec![
            CheckResult {
                name: "posterior mean".to_string(),
                cases: batches,
                max_error: mean_error,
                tolerance: 1e-6,
            },
            CheckResult {
                name: "posterior covariance".to_string(),
                cases: batches,
                max_error: cov_error,
                tolerance: 1e-6,
            },
        ],
    })
}

/// Checks that with batch-sized observation noise `P_n = N·I` and the prior
/// term dropped, the regularized filter objective collapses to the half mean
/// squared TD error at every parameter vector.
pub fn objective_equality_suite() -> Result<SuiteReport, KovaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cases = 1_000;
    let mut max_error: f64 = 0.0;
    for case in 0..cases {
        let n = rng.gen_range(1..=6);
        let (model, theta) = if case % 2 == 0 {
            let d = rng.gen_range(3..=8);
            let model = ValueModel::linear(d)?;
            let theta = random_vector(&mut rng, d);
            (model, theta)
        } else {
            let inputs = rng.gen_range(2..=4);
            let hidden = rng.gen_range(2..=4);
            let model = ValueModel::mlp(inputs, &[hidden], Nonlinearity::Tanh, 1)?;
            let theta = random_vector(&mut rng, model.param_count());
            (model, theta)
        };
        let inputs: Vec<ModelInput> = (0..n)
            .map(|_| ModelInput::state(random_vector(&mut rng, model.inputs())))
            .collect();
        let targets = random_vector(&mut rng, n);
        let batch = ObservationBatch::at_parameters(&model, &theta, inputs, targets)?;
        let p_n = build_observation_noise(&ObservationNoise::BatchSize, n)?;
        let theta_pred = random_vector(&mut rng, theta.len());
        let ekf = ekf_objective(&theta, &batch, &theta_pred, None, &p_n)?;
        let mle = mle_objective(&batch);
        max_error = max_error.max((ekf - mle).abs() / mle.abs().max(1.0));
    }
    Ok(SuiteReport {
        suite: "objective-equality".to_string(),
        checks: vec![CheckResult {
            name: "regularized objective vs half mean squared error".to_string(),
            cases,
            max_error,
            tolerance: 1e-12,
        }],
    })
}

/// Central finite-difference check of the analytic batch Jacobian on random
/// smooth networks.
pub fn jacobian_suite() -> Result<SuiteReport, KovaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cases = 100;
    let mut max_error: f64 = 0.0;
    for _ in 0..cases {
        let inputs = rng.gen_range(2..=5);
        let layers = rng.gen_range(1..=2);
        let hidden: Vec<usize> = (0..layers).map(|_| rng.gen_range(2..=6)).collect();
        let heads = rng.gen_range(1..=4);
        let model = ValueModel::mlp(inputs, &hidden, Nonlinearity::Tanh, heads)?;
        let d = model.param_count();
        let theta = random_vector(&mut rng, d);
        let batch_inputs: Vec<ModelInput> = (0..3)
            .map(|_| {
                let features = random_vector(&mut rng, inputs);
                if heads == 1 {
                    ModelInput::state(features)
                } else {
                    ModelInput::state_action(features, rng.gen_range(0..heads))
                }
            })
            .collect();
        let (_, jac) = model.evaluate_with_jacobian(&theta, &batch_inputs)?;

        let mut fd = Array2::zeros((d, batch_inputs.len()));
        for j in 0..d {
            let h = 1e-6 * theta[j].abs().max(1.0);
            let mut plus = theta.clone();
            plus[j] += h;
            let mut minus = theta.clone();
            minus[j] -= h;
            let f_plus = model.evaluate(&plus, &batch_inputs)?;
            let f_minus = model.evaluate(&minus, &batch_inputs)?;
            for col in 0..batch_inputs.len() {
                fd[[j, col]] = (f_plus[col] - f_minus[col]) / (2.0 * h);
            }
        }
        max_error = max_error.max(relative_frobenius(&jac, &fd));
    }
    Ok(SuiteReport {
        suite: "jacobian".to_string(),
        checks: vec![CheckResult {
            name: "analytic vs central finite-difference Jacobian".to_string(),
            cases,
            max_error,
            tolerance: 1e-5,
        }],
    })
}

/// Verifies the exact chain values by plugging them back into the Bellman
/// equation with transition probabilities recomputed from first principles.
pub fn chain_oracle_suite() -> Result<SuiteReport, KovaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let cases = 30;
    let mut max_error: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.gen_range(2..=8);
        let slip = rng.gen_range(0.0..0.4);
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gamma = rng.gen_range(0.5..0.95);
        let spec = ChainMdpSpec::new(n, slip, rewards.clone(), gamma)
            .map_err(|e| KovaError::InvalidConfig(e.to_string()))?;
        let policy: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                let p = rng.gen_range(0.0..=1.0);
                [p, 1.0 - p]
            })
            .collect();
        let v = chain_exact_value(&spec, &policy)
            .map_err(|e| KovaError::InvalidConfig(e.to_string()))?;

        // Bellman residual with independently recomputed dynamics: action 0
        // moves left, action 1 moves right, a slip flips the direction, and
        // the boundary states absorb the move.
        for s in 0..n {
            let mut expected_next = 0.0;
            for (action, prob_action) in policy[s].iter().enumerate() {
                for (flipped, prob_move) in [(false, 1.0 - slip), (true, slip)] {
                    let goes_right = (action == 1) != flipped;
                    let dest = if goes_right {
                        (s + 1).min(n - 1)
                    } else {
                        s.saturating_sub(1)
                    };
                    expected_next += prob_action * prob_move * v[dest];
                }
            }
            let residual = (v[s] - (rewards[s] + gamma * expected_next)).abs();
            max_error = max_error.max(residual);
        }
    }
    Ok(SuiteReport {
        suite: "chain-oracle".to_string(),
        checks: vec![CheckResult {
            name: "Bellman residual of the exact solution".to_string(),
            cases,
            max_error,
            tolerance: 1e-10,
        }],
    })
}
