//! Unscented-filter temporal-difference baseline.
//!
//! Where the main filter linearizes the observation function once per batch,
//! this baseline propagates `2d + 1` deterministically chosen parameter
//! samples (sigma points) through a *scalar* observation built from a single
//! transition:
//!
//! ```text
//! g(θ) = Q(s, a; θ) − γ max_a' Q(s', a'; θ)      (non-terminal)
//! g(θ) = Q(s, a; θ)                              (terminal)
//! ```
//!
//! observed against the reward `r`. The batch size is 1 by construction —
//! the observation couples the parameters nonlinearly through the max, so
//! samples cannot be stacked. Each sigma point costs two forward passes
//! (current and next state), so one step costs `2(2d + 1)` model
//! evaluations; that cost asymmetry versus the two whole-batch sweeps of the
//! main filter is the point of the comparison.

use crate::linalg::{cholesky_factor, symmetrize, SpdMatrix};
use crate::model::{ModelInput, ValueModel};
use crate::optimizer::{FilterState, KovaError};
use crate::targets::Transition;
use ndarray::{Array1, Array2};

/// Hyperparameters of the unscented TD filter.
#[derive(Debug, Clone, PartialEq)]
pub struct KtdConfig {
    /// Damping on mean and covariance updates, in `(0, 1]`.
    pub learning_rate: f64,
    /// Initial covariance `P₀ = initial_covariance_scale · I`.
    pub initial_covariance_scale: f64,
    /// Scalar observation-noise variance.
    pub observation_noise: f64,
    /// Evolution factor: `P_pred = (1 + eta) · P`.
    pub eta: f64,
    /// Sigma-point spread parameter, `κ ≥ 0`.
    pub kappa: f64,
    /// Bounded-uncertainty guard: covariance diagonal entries above this are
    /// scaled back via an exactly PSD-preserving diagonal congruence. The
    /// multiplicative evolution factor inflates unexcited parameter
    /// directions exponentially (covariance windup) without it.
    pub covariance_cap: f64,
}

impl Default for KtdConfig {
    /// `P_n = 1`, `P₀ = 10·I`, `η = 0.01`, `κ = 0`, undamped, cap `1e4`.
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            initial_covariance_scale: 10.0,
            observation_noise: 1.0,
            eta: 0.01,
            kappa: 0.0,
            covariance_cap: crate::optimizer::DEFAULT_COVARIANCE_CAP,
        }
    }
}

impl KtdConfig {
    pub fn validate(&self) -> Result<(), KovaError> {
        if !(self.learning_rate.is_finite()
            && 0.0 < self.learning_rate
            && self.learning_rate <= 1.0)
        {
            return Err(KovaError::InvalidConfig(format!(
                "learning rate must lie in (0, 1], got {}",
                self.learning_rate
            )));
        }
        if !(self.initial_covariance_scale.is_finite() && self.initial_covariance_scale > 0.0) {
            return Err(KovaError::InvalidConfig(format!(
                "initial covariance scale must be > 0, got {}",
                self.initial_covariance_scale
            )));
        }
        if !(self.observation_noise.is_finite() && self.observation_noise >= 0.0) {
            return Err(KovaError::InvalidConfig(format!(
                "observation noise must be finite and >= 0, got {}",
                self.observation_noise
            )));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(KovaError::InvalidConfig(format!(
                "evolution factor must be finite and >= 0, got {}",
                self.eta
            )));
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(KovaError::InvalidConfig(format!(
                "kappa must be finite and >= 0, got {}",
                self.kappa
            )));
        }
        if !(self.covariance_cap.is_finite() && self.covariance_cap > 0.0) {
            return Err(KovaError::InvalidConfig(format!(
                "covariance cap must be > 0, got {}",
                self.covariance_cap
            )));
        }
        Ok(())
    }
}

/// `2d + 1` parameter samples with matching weights: the mean, then
/// `θ̂ + L_j`, then `θ̂ − L_j` for the columns `L_j` of `√((d+κ) P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSet {
    points: Vec<Array1<f64>>,
    weights: Vec<f64>,
}

impl SigmaSet {
    pub fn points(&self) -> &[Array1<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Deterministic sampling of a Gaussian: weights `w₀ = κ/(d+κ)`,
/// `wᵢ = 1/(2(d+κ))`, which sum to one; points symmetric about the mean.
pub fn sigma_points(theta: &Array1<f64>, p: &SpdMatrix, kappa: f64) -> Result<SigmaSet, KovaError> {
    let d = theta.len();
    if p.dim() != d {
        return Err(KovaError::ShapeMismatch {
            expected: format!("{d} x {d} covariance"),
            got: format!("{0} x {0}", p.dim()),
        });
    }
    if !(kappa.is_finite() && kappa >= 0.0) {
        return Err(KovaError::InvalidConfig(format!(
            "kappa must be finite and >= 0, got {kappa}"
        )));
    }
    let scale = d as f64 + kappa;
    let scaled = SpdMatrix::from_symmetric_unchecked(p.as_array() * scale);
    let l = cholesky_factor(&scaled)?;

    let mut points = Vec::with_capacity(2 * d + 1);
    let mut weights = Vec::with_capacity(2 * d + 1);
    points.push(theta.clone());
    weights.push(kappa / scale);
    let w = 1.0 / (2.0 * scale);
    for j in 0..d {
        points.push(theta + &l.column(j));
        weights.push(w);
    }
    for j in 0..d {
        points.push(theta - &l.column(j));
        weights.push(w);
    }
    Ok(SigmaSet { points, weights })
}

/// The scalar TD observation at one parameter sample. Terminal transitions
/// drop the bootstrap term entirely. Returns the value and the number of
/// forward passes spent (2 non-terminal, 1 terminal).
fn observe(
    model: &ValueModel,
    theta: &Array1<f64>,
    tr: &Transition,
    gamma: f64,
) -> Result<(f64, u64), KovaError> {
    let state = Array1::from(tr.state.clone());
    let q_sa = model.evaluate(theta, &[ModelInput::state_action(state, tr.action)])?[0];
    if tr.terminal {
        return Ok((q_sa, 1));
    }
    let next = Array1::from(tr.next_state.clone());
    let q_next = model.q_values(theta, &next)?;
    let max_next = q_next.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((q_sa - gamma * max_next, 2))
}

/// One unscented filter step on a single transition.
///
/// Predicts with `P_pred = (1 + η) P`, pushes every sigma point through the
/// scalar observation, moment-matches the joint Gaussian, and applies the
/// damped scalar-gain update. Returns the new state and the exact number of
/// model evaluations spent — `2(2d + 1)` for a non-terminal transition.
pub fn ktd_step(
    state: &FilterState,
    tr: &Transition,
    model: &ValueModel,
    gamma: f64,
    cfg: &KtdConfig,
) -> Result<(FilterState, u64), KovaError> {
    cfg.validate()?;
    let d = state.dim();
    let theta_pred = state.theta().clone();
    let p_pred =
        SpdMatrix::from_symmetric_unchecked(state.covariance().as_array() * (1.0 + cfg.eta));

    let sigma = sigma_points(&theta_pred, &p_pred, cfg.kappa)?;
    let mut evals = 0u64;
    let mut g = Array1::zeros(sigma.len());
    for (i, point) in sigma.points().iter().enumerate() {
        let (value, passes) = observe(model, point, tr, gamma)?;
        g[i] = value;
        evals += passes;
    }

    let g_mean: f64 = sigma
        .weights()
        .iter()
        .zip(g.iter())
        .map(|(w, gi)| w * gi)
        .sum();
    let mut cross = Array1::<f64>::zeros(d);
    let mut g_var = 0.0;
    for ((w, point), gi) in sigma.weights().iter().zip(sigma.points()).zip(g.iter()) {
        let dg = gi - g_mean;
        g_var += w * dg * dg;
        cross = cross + (point - &theta_pred) * (*w * dg);
    }
    let s = g_var + cfg.observation_noise;
    let gain = cross / s;

    let alpha = cfg.learning_rate;
    let innovation = tr.reward - g_mean;
    let theta = &theta_pred + &(&gain * (alpha * innovation));
    let outer = Array2::from_shape_fn((d, d), |(r, c)| gain[r] * gain[c]);
    let mut p = symmetrize(&(p_pred.as_array() - &(outer * (alpha * s))));
    crate::optimizer::cap_covariance(&mut p, cfg.covariance_cap);

    Ok((
        FilterState::from_parts(
            theta,
            SpdMatrix::from_symmetric_unchecked(p),
            state.step() + 1,
        ),
        evals,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::{
        kova_step, EvolutionNoise, KovaConfig, NoiseSchedule, ObservationBatch, ObservationNoise,
    };
    use ndarray::arr1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn transition(s: &[f64], a: usize, r: f64, s2: &[f64], terminal: bool) -> Transition {
        Transition {
            state: s.to_vec(),
            action: a,
            reward: r,
            next_state: s2.to_vec(),
            terminal,
        }
    }

    #[test]
    fn scalar_sigma_points_are_plus_minus_one() {
        let set = sigma_points(&arr1(&[0.0]), &SpdMatrix::identity(1), 0.0).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.points()[0][0], 0.0);
        assert_eq!(set.points()[1][0], 1.0);
        assert_eq!(set.points()[2][0], -1.0);
        assert_eq!(set.weights(), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn kappa_zero_gives_zero_center_weight() {
        for d in [1usize, 3, 7] {
            let set = sigma_points(&Array1::zeros(d), &SpdMatrix::identity(d), 0.0).unwrap();
            assert_eq!(set.weights()[0], 0.0);
            let total: f64 = set.weights().iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sigma_points_match_first_two_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for kappa in [0.0, 1.0, 3.0] {
            let d = 3;
            let theta = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
            let b = Array2::from_shape_fn((d, d), |_| rng.gen_range(-1.0..1.0));
            let mut m = b.t().dot(&b);
            for i in 0..d {
                m[[i, i]] += 0.5;
            }
            let p = SpdMatrix::new(symmetrize(&m)).unwrap();
            let set = sigma_points(&theta, &p, kappa).unwrap();

            let mut mean = Array1::<f64>::zeros(d);
            let mut spread = Array2::<f64>::zeros((d, d));
            for (w, point) in set.weights().iter().zip(set.points()) {
                mean = mean + point * *w;
                let centered = point - &theta;
                for r in 0..d {
                    for c in 0..d {
                        spread[[r, c]] += w * centered[r] * centered[c];
                    }
                }
            }
            let mean_err = (&mean - &theta).iter().map(|v| v.abs()).fold(0.0, f64::max);
            let spread_err = (&spread - p.as_array())
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            assert!(
                mean_err <= 1e-10,
                "kappa {kappa}: mean error {mean_err:.2e}"
            );
            assert!(
                spread_err <= 1e-10,
                "kappa {kappa}: spread error {spread_err:.2e}"
            );
        }
    }

    #[test]
    fn points_are_symmetric_about_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let d = 4;
        let theta = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
        let set = sigma_points(&theta, &SpdMatrix::scaled_identity(d, 2.0), 0.5).unwrap();
        for j in 0..d {
            let plus = &set.points()[1 + j] - &theta;
            let minus = &set.points()[1 + d + j] - &theta;
            let mirror = (&plus + &minus).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(mirror <= 1e-12);
        }
    }

    /// 2-feature, 2-action linear Q model shared by the filter tests.
    fn linear_q() -> (ValueModel, Array1<f64>) {
        let model = ValueModel::mlp(2, &[], crate::model::Nonlinearity::Relu, 2).unwrap();
        let theta = model.init_parameters(5);
        (model, theta)
    }

    #[test]
    fn zero_innovation_leaves_mean_unchanged() {
        let (model, theta) = linear_q();
        let cfg = KtdConfig {
            eta: 0.0,
            ..KtdConfig::default()
        };
        let state = FilterState::new(
            theta.clone(),
            SpdMatrix::scaled_identity(theta.len(), cfg.initial_covariance_scale),
        )
        .unwrap();
        // gamma = 0 keeps the observation linear (no max over bootstrap
        // actions), so the unscented mean is exact and the innovation
        // vanishes when the reward equals the observation at the mean.
        let mut tr = transition(&[0.4, -0.2], 1, 0.0, &[0.1, 0.3], false);
        let (g0, _) = observe(&model, &theta, &tr, 0.0).unwrap();
        tr.reward = g0;
        let (next, _) = ktd_step(&state, &tr, &model, 0.0, &cfg).unwrap();
        let drift = (next.theta() - &theta)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(drift <= 1e-12);
        assert!(next.covariance().trace() < state.covariance().trace());
    }

    #[test]
    fn linear_stream_coincides_with_the_jacobian_filter() {
        // gamma = 0 and eta = 0: the observation is linear in theta, the
        // unscented transform is exact, and both filters must walk the same
        // trajectory from the same prior.
        let (model, theta0) = linear_q();
        let d = theta0.len();
        let ktd_cfg = KtdConfig {
            eta: 0.0,
            initial_covariance_scale: 10.0,
            observation_noise: 1.0,
            ..KtdConfig::default()
        };
        let kova_cfg = KovaConfig::new(
            1.0,
            10.0,
            NoiseSchedule::new(EvolutionNoise::Zero, ObservationNoise::FixedDiagonal(1.0)).unwrap(),
        )
        .unwrap();
        let mut ktd_state =
            FilterState::new(theta0.clone(), SpdMatrix::scaled_identity(d, 10.0)).unwrap();
        let mut kova_state = FilterState::from_initial(theta0, &kova_cfg).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for step in 0..100 {
            let tr = transition(
                &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                rng.gen_range(0..2),
                rng.gen_range(-1.0..1.0),
                &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                false,
            );
            let (next_ktd, evals) = ktd_step(&ktd_state, &tr, &model, 0.0, &ktd_cfg).unwrap();
            assert_eq!(evals, 2 * (2 * d as u64 + 1));
            ktd_state = next_ktd;

            // The equivalent single-observation batch: target r, input (s, a).
            let inputs = vec![ModelInput::state_action(
                Array1::from(tr.state.clone()),
                tr.action,
            )];
            let batch = ObservationBatch::at_parameters(
                &model,
                kova_state.theta(),
                inputs,
                arr1(&[tr.reward]),
            )
            .unwrap();
            kova_state = kova_step(&kova_state, &batch, &kova_cfg).unwrap();

            let gap = (ktd_state.theta() - kova_state.theta())
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            assert!(
                gap <= 1e-8,
                "step {step}: trajectories diverged by {gap:.2e}"
            );
        }
    }

    #[test]
    fn evaluation_count_is_exact_per_step() {
        let (model, theta) = linear_q();
        let d = theta.len() as u64;
        let cfg = KtdConfig::default();
        let state = FilterState::new(theta, SpdMatrix::scaled_identity(d as usize, 10.0)).unwrap();

        let tr = transition(&[0.5, 0.5], 0, 0.1, &[0.2, 0.2], false);
        let (_, evals) = ktd_step(&state, &tr, &model, 0.9, &cfg).unwrap();
        assert_eq!(evals, 2 * (2 * d + 1));

        let done = transition(&[0.5, 0.5], 0, 0.1, &[0.2, 0.2], true);
        let (_, evals) = ktd_step(&state, &done, &model, 0.9, &cfg).unwrap();
        assert_eq!(evals, 2 * d + 1);
    }

    #[test]
    fn terminal_observation_ignores_the_discount() {
        let (model, theta) = linear_q();
        let cfg = KtdConfig::default();
        let state = FilterState::new(theta, SpdMatrix::scaled_identity(6, 10.0)).unwrap();
        let done = transition(&[0.5, -0.5], 1, 0.7, &[0.2, 0.2], true);
        let (a, _) = ktd_step(&state, &done, &model, 0.9, &cfg).unwrap();
        let (b, _) = ktd_step(&state, &done, &model, 0.1, &cfg).unwrap();
        for (x, y) in a.theta().iter().zip(b.theta().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = KtdConfig::default();
        assert!(ok.validate().is_ok());
        assert!(KtdConfig {
            learning_rate: 0.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(KtdConfig {
            kappa: -1.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(KtdConfig {
            eta: f64::NAN,
            ..ok
        }
        .validate()
        .is_err());
    }
}
