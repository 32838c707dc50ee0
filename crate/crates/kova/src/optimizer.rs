//! The Kalman filter over value-function parameters.
//!
//! Parameters follow a random walk `θ_t = θ_{t-1} + v_t` and are observed
//! through a batch of Bellman targets `y = h(u; θ) + n`. One step:
//!
//! 1. predict: `θ̂_pred = θ̂`, `P_pred = P + P_v`;
//! 2. linearize `h` at `θ̂_pred` to get the `d x N` Jacobian `J`;
//! 3. innovation covariance `S = Jᵀ P_pred J + P_n`;
//! 4. gain `K = P_pred J S⁻¹` — only the `N x N` matrix `S` is ever
//!    inverted (via Cholesky solve), never anything `d x d`;
//! 5. update `θ̂' = θ̂_pred + α K (y − h)` and
//!    `P' = P_pred − α K S Kᵀ`, with α damping both the mean and the
//!    covariance, followed by symmetrization.
//!
//! The step is the exact minimizer (for linear `h`) of the regularized
//! objective `½ δᵀ P_n⁻¹ δ + ½ (θ − θ̂_pred)ᵀ P_pred⁻¹ (θ − θ̂_pred)`,
//! which [`ekf_objective`] evaluates directly; with `P_n = N·I` and the
//! prior term dropped it collapses to the plain half-mean-squared TD error
//! of [`mle_objective`].

use crate::linalg::{min_eigenvalue, spd_solve, spd_solve_vec, symmetrize, LinalgError, SpdMatrix};
use crate::model::{ModelError, ModelInput, ValueModel};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KovaError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("observation noise needs {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Evolution-noise policy: how `P_v` is formed in the predict step.
#[derive(Debug, Clone, PartialEq)]
pub enum EvolutionNoise {
    /// `P_v = 0`; the posterior can only contract.
    Zero,
    /// `P_v = σ_v² I` with a fixed variance.
    FixedDiagonal(f64),
    /// Fading memory: `P_v = (η / (1−η)) P`, so `P_pred = P / (1−η)`.
    /// Inflates uncertainty multiplicatively and lets the filter track
    /// nonstationary targets; `η ∈ (0, 1)`.
    FadingMemory(f64),
}

/// Observation-noise policy: the `N x N` covariance of the target batch.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationNoise {
    /// `P_n = N·I`, the convention that makes the data term of the EKF
    /// objective equal the half-mean-squared TD error.
    BatchSize,
    /// `P_n = σ_n² I`.
    FixedDiagonal(f64),
    /// `P_n = diag(weights)`; the length must match the batch size.
    CustomDiagonal(Vec<f64>),
}

/// Validated pair of evolution and observation noise policies.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    evolution: EvolutionNoise,
    observation: ObservationNoise,
}

impl NoiseSchedule {
    pub fn new(
        evolution: EvolutionNoise,
        observation: ObservationNoise,
    ) -> Result<Self, KovaError> {
        match evolution {
            EvolutionNoise::FixedDiagonal(s) if !(s.is_finite() && s >= 0.0) => {
                return Err(KovaError::InvalidConfig(format!(
                    "evolution variance must be finite and >= 0, got {s}"
                )));
            }
            EvolutionNoise::FadingMemory(eta) if !(eta.is_finite() && 0.0 < eta && eta < 1.0) => {
                return Err(KovaError::InvalidConfig(format!(
                    "fading-memory factor must lie in (0, 1), got {eta}"
                )));
            }
            _ => {}
        }
        match &observation {
            ObservationNoise::FixedDiagonal(s) if !(s.is_finite() && *s >= 0.0) => {
                return Err(KovaError::InvalidConfig(format!(
                    "observation variance must be finite and >= 0, got {s}"
                )));
            }
            ObservationNoise::CustomDiagonal(w)
                if w.is_empty() || !w.iter().all(|v| v.is_finite() && *v > 0.0) =>
            {
                return Err(KovaError::InvalidConfig(
                    "custom observation weights must be non-empty and all > 0".to_string(),
                ));
            }
            _ => {}
        }
        Ok(Self {
            evolution,
            observation,
        })
    }

    pub fn evolution(&self) -> &EvolutionNoise {
        &self.evolution
    }

    pub fn observation(&self) -> &ObservationNoise {
        &self.observation
    }
}

/// Filter hyperparameters: damping α, initial covariance scale, noise
/// policies, covariance cap.
#[derive(Debug, Clone, PartialEq)]
pub struct KovaConfig {
    learning_rate: f64,
    initial_covariance_scale: f64,
    noise: NoiseSchedule,
    covariance_cap: f64,
}

impl KovaConfig {
    /// `learning_rate` must lie in `(0, 1]`; `initial_covariance_scale` sets
    /// `P₀ = scale · I` and must be positive. The covariance cap defaults to
    /// `1e4` — see [`KovaConfig::with_covariance_cap`].
    pub fn new(
        learning_rate: f64,
        initial_covariance_scale: f64,
        noise: NoiseSchedule,
    ) -> Result<Self, KovaError> {
        if !(learning_rate.is_finite() && 0.0 < learning_rate && learning_rate <= 1.0) {
            return Err(KovaError::InvalidConfig(format!(
                "learning rate must lie in (0, 1], got {learning_rate}"
            )));
        }
        if !(initial_covariance_scale.is_finite() && initial_covariance_scale > 0.0) {
            return Err(KovaError::InvalidConfig(format!(
                "initial covariance scale must be > 0, got {initial_covariance_scale}"
            )));
        }
        Ok(Self {
            learning_rate,
            initial_covariance_scale,
            noise,
            covariance_cap: DEFAULT_COVARIANCE_CAP,
        })
    }

    /// Bounds parameter uncertainty: after each update, any diagonal entry of
    /// the covariance above `cap` is scaled back to it by a diagonal
    /// congruence `P ← D P D` (exactly symmetry- and PSD-preserving, a no-op
    /// while every entry is within the cap).
    ///
    /// Why a cap exists at all: multiplicative evolution noise inflates the
    /// covariance every step, but parameter directions the data never excites
    /// (dead units, constant-zero features) receive no measurement shrinkage,
    /// so their variance grows exponentially — covariance windup. Unchecked,
    /// the resulting ill-conditioning makes the update arithmetic cancel
    /// catastrophically. The cap is the standard bounded-uncertainty guard.
    pub fn with_covariance_cap(mut self, cap: f64) -> Result<Self, KovaError> {
        if !(cap.is_finite() && cap > 0.0) {
            return Err(KovaError::InvalidConfig(format!(
                "covariance cap must be > 0, got {cap}"
            )));
        }
        self.covariance_cap = cap;
        Ok(self)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn initial_covariance_scale(&self) -> f64 {
        self.initial_covariance_scale
    }

    pub fn noise(&self) -> &NoiseSchedule {
        &self.noise
    }

    pub fn covariance_cap(&self) -> f64 {
        self.covariance_cap
    }
}

/// Default bound on covariance diagonal entries (see
/// [`KovaConfig::with_covariance_cap`]).
pub const DEFAULT_COVARIANCE_CAP: f64 = 1e4;

impl Default for KovaConfig {
    /// α = 1, `P₀ = I`, fading memory η = 0.01, `P_n = N·I`.
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            initial_covariance_scale: 1.0,
            noise: NoiseSchedule {
                evolution: EvolutionNoise::FadingMemory(0.01),
                observation: ObservationNoise::BatchSize,
            },
            covariance_cap: DEFAULT_COVARIANCE_CAP,
        }
    }
}

/// Applies the bounded-uncertainty cap in place: diagonal entries above `cap`
/// are scaled back to it via the congruence `P ← D P D`,
/// `D = diag(min(1, √(cap/pᵢᵢ)))`. No-op (bit-exact) when nothing exceeds
/// the cap.
pub(crate) fn cap_covariance(p: &mut Array2<f64>, cap: f64) {
    let d = p.nrows();
    if (0..d).all(|i| p[[i, i]] <= cap) {
        return;
    }
    let scale: Vec<f64> = (0..d)
        .map(|i| {
            let pii = p[[i, i]];
            if pii > cap {
                (cap / pii).sqrt()
            } else {
                1.0
            }
        })
        .collect();
    for i in 0..d {
        for j in 0..d {
            p[[i, j]] *= scale[i] * scale[j];
        }
    }
}

/// Rewrites `m`, holding `K S Kᵀ`, to the posterior covariance
/// `factor·P + var·I − α·sym(m)` in place. `p` must be symmetric; each
/// mirror pair is written once with the same value, so the result is bitwise
/// symmetric without a second full pass over the matrix.
fn posterior_covariance_in_place(
    m: &mut Array2<f64>,
    p: &Array2<f64>,
    factor: f64,
    var: f64,
    alpha: f64,
) {
    let d = p.nrows();
    // Either row- or column-major storage is fine: both matrices are
    // symmetric (bitwise for `p`, by the mirrored writes for `m`), so the
    // flat index `i·d + j` addresses the (i, j)/(j, i) pair in any order.
    let ms = m
        .as_slice_memory_order_mut()
        .expect("matrix-product output is contiguous");
    let ps = p
        .as_slice_memory_order()
        .expect("covariance storage is contiguous");

    // Tiled so every main-memory access streams along rows; the mirror block
    // goes through a cache-resident transposed scratch instead of stride-d
    // column walks, which at d in the thousands is the difference between
    // bandwidth-bound and latency-bound.
    const TILE: usize = 64;
    let mut scratch = [0.0f64; TILE * TILE];
    for bi in (0..d).step_by(TILE) {
        let ei = (bi + TILE).min(d);
        // Diagonal block: both sides of each pair live in it, and it is small
        // enough that the strided mirror access stays cached.
        for i in bi..ei {
            let diag = i * d + i;
            ms[diag] = factor * ps[diag] + var - alpha * ms[diag];
            for j in (i + 1)..ei {
                let up = i * d + j;
                let lo = j * d + i;
                let v = factor * ps[up] - alpha * (0.5 * (ms[up] + ms[lo]));
                ms[up] = v;
                ms[lo] = v;
            }
        }
        // Off-diagonal block pairs: (bi.., bj..) above the diagonal and its
        // mirror below.
        for bj in (ei..d).step_by(TILE) {
            let ej = (bj + TILE).min(d);
            let tj = ej - bj;
            // Load the mirror block transposed, reading its rows in order.
            for j in bj..ej {
                let row = &ms[j * d + bi..j * d + ei];
                for (i_off, &v) in row.iter().enumerate() {
                    scratch[i_off * tj + (j - bj)] = v;
                }
            }
            // Fuse along the upper block's rows, updating the scratch copy in
            // step.
            for i in bi..ei {
                let sc = &mut scratch[(i - bi) * tj..(i - bi) * tj + tj];
                let up = &mut ms[i * d + bj..i * d + ej];
                let pr = &ps[i * d + bj..i * d + ej];
                for k in 0..tj {
                    let v = factor * pr[k] - alpha * (0.5 * (up[k] + sc[k]));
                    up[k] = v;
                    sc[k] = v;
                }
            }
            // Write the mirror block back, again along its rows.
            for j in bj..ej {
                let row = &mut ms[j * d + bi..j * d + ei];
                let jo = j - bj;
                for (i_off, slot) in row.iter_mut().enumerate() {
                    *slot = scratch[i_off * tj + jo];
                }
            }
        }
    }
}

/// Gaussian belief over the parameters: posterior mean, covariance, step count.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    theta: Array1<f64>,
    p: SpdMatrix,
    step: u64,
}

impl FilterState {
    pub fn new(theta: Array1<f64>, p: SpdMatrix) -> Result<Self, KovaError> {
        if theta.len() != p.dim() {
            return Err(KovaError::ShapeMismatch {
                expected: format!("covariance of dim {}", theta.len()),
                got: format!("{}", p.dim()),
            });
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(KovaError::InvalidConfig(
                "parameter mean has non-finite entries".to_string(),
            ));
        }
        Ok(Self { theta, p, step: 0 })
    }

    /// Internal constructor for filter implementations in this crate.
    pub(crate) fn from_parts(theta: Array1<f64>, p: SpdMatrix, step: u64) -> Self {
        Self { theta, p, step }
    }

    /// Fresh state with `P₀ = initial_covariance_scale · I`.
    pub fn from_initial(theta: Array1<f64>, cfg: &KovaConfig) -> Result<Self, KovaError> {
        let dim = theta.len();
        Self::new(
            theta,
            SpdMatrix::scaled_identity(dim, cfg.initial_covariance_scale),
        )
    }

    pub fn theta(&self) -> &Array1<f64> {
        &self.theta
    }

    pub fn covariance(&self) -> &SpdMatrix {
        &self.p
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

/// One batch of filter observations: inputs, targets `y`, predictions
/// `h(u; θ̂)`, and the Jacobian of `h` at the same `θ̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    inputs: Vec<ModelInput>,
    targets: Array1<f64>,
    jacobian: Array2<f64>,
    predictions: Array1<f64>,
}

impl ObservationBatch {
    /// Wraps precomputed pieces. The caller guarantees that `jacobian` and
    /// `predictions` were evaluated at the same parameter vector; lengths and
    /// finiteness are validated here.
    pub fn new(
        inputs: Vec<ModelInput>,
        targets: Array1<f64>,
        jacobian: Array2<f64>,
        predictions: Array1<f64>,
    ) -> Result<Self, KovaError> {
        let n = inputs.len();
        if n == 0 {
            return Err(KovaError::ShapeMismatch {
                expected: "at least one observation".to_string(),
                got: "empty batch".to_string(),
            });
        }
        if targets.len() != n || predictions.len() != n || jacobian.ncols() != n {
            return Err(KovaError::ShapeMismatch {
                expected: format!("targets/predictions/Jacobian columns of length {n}"),
                got: format!(
                    "{} / {} / {}",
                    targets.len(),
                    predictions.len(),
                    jacobian.ncols()
                ),
            });
        }
        let finite = targets.iter().all(|v| v.is_finite())
            && predictions.iter().all(|v| v.is_finite())
            && jacobian.iter().all(|v| v.is_finite());
        if !finite {
            return Err(KovaError::InvalidConfig(
                "observation batch contains non-finite values".to_string(),
            ));
        }
        Ok(Self {
            inputs,
            targets,
            jacobian,
            predictions,
        })
    }

    /// Builds the batch by evaluating the model at `theta`: one shared
    /// forward pass yields predictions and the exact Jacobian together.
    pub fn at_parameters(
        model: &ValueModel,
        theta: &Array1<f64>,
        inputs: Vec<ModelInput>,
        targets: Array1<f64>,
    ) -> Result<Self, KovaError> {
        let (predictions, jacobian) = model.evaluate_with_jacobian(theta, &inputs)?;
        Self::new(inputs, targets, jacobian, predictions)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[ModelInput] {
        &self.inputs
    }

    pub fn targets(&self) -> &Array1<f64> {
        &self.targets
    }

    pub fn jacobian(&self) -> &Array2<f64> {
        &self.jacobian
    }

    pub fn predictions(&self) -> &Array1<f64> {
        &self.predictions
    }

    /// Innovation `y − h`.
    pub fn innovation(&self) -> Array1<f64> {
        &self.targets - &self.predictions
    }
}

/// Predict step of the random-walk model: the mean is carried over unchanged
/// and the covariance grows by the evolution noise.
pub fn predict(state: &FilterState, noise: &NoiseSchedule) -> (Array1<f64>, SpdMatrix) {
    let p_pred = match noise.evolution {
        EvolutionNoise::Zero => state.p.clone(),
        EvolutionNoise::FixedDiagonal(var) => {
            let mut m = state.p.as_array().clone();
            for i in 0..m.nrows() {
                m[[i, i]] += var;
            }
            SpdMatrix::from_symmetric_unchecked(m)
        }
        EvolutionNoise::FadingMemory(eta) => {
            let factor = 1.0 + eta / (1.0 - eta);
            SpdMatrix::from_symmetric_unchecked(state.p.as_array() * factor)
        }
    };
    (state.theta.clone(), p_pred)
}

/// Observation-noise covariance for a batch of `n` targets.
pub fn build_observation_noise(
    policy: &ObservationNoise,
    n: usize,
) -> Result<SpdMatrix, KovaError> {
    if n == 0 {
        return Err(KovaError::ShapeMismatch {
            expected: "batch size >= 1".to_string(),
            got: "0".to_string(),
        });
    }
    match policy {
        ObservationNoise::BatchSize => Ok(SpdMatrix::scaled_identity(n, n as f64)),
        ObservationNoise::FixedDiagonal(var) => Ok(SpdMatrix::scaled_identity(n, *var)),
        ObservationNoise::CustomDiagonal(w) => {
            if w.len() != n {
                return Err(KovaError::WeightCount {
                    expected: n,
                    got: w.len(),
                });
            }
            Ok(SpdMatrix::from_diagonal(w)?)
        }
    }
}

/// `P_pred · J`, shared between the innovation covariance and the gain.
fn propagated_jacobian(
    p_pred: &SpdMatrix,
    jacobian: &Array2<f64>,
) -> Result<Array2<f64>, KovaError> {
    if jacobian.nrows() != p_pred.dim() {
        return Err(KovaError::ShapeMismatch {
            expected: format!("Jacobian with {} rows", p_pred.dim()),
            got: format!("{}", jacobian.nrows()),
        });
    }
    Ok(p_pred.as_array().dot(jacobian))
}

fn innovation_from_propagated(
    b: &Array2<f64>,
    jacobian: &Array2<f64>,
    p_n: &SpdMatrix,
) -> Result<SpdMatrix, KovaError> {
    if p_n.dim() != jacobian.ncols() {
        return Err(KovaError::ShapeMismatch {
            expected: format!(
                "{} x {} observation noise",
                jacobian.ncols(),
                jacobian.ncols()
            ),
            got: format!("{0} x {0}", p_n.dim()),
        });
    }
    let s = jacobian.t().dot(b) + p_n.as_array();
    Ok(SpdMatrix::from_symmetric_unchecked(symmetrize(&s)))
}

/// Innovation covariance `S = Jᵀ P_pred J + P_n`, symmetrized.
pub fn innovation_covariance(
    p_pred: &SpdMatrix,
    jacobian: &Array2<f64>,
    p_n: &SpdMatrix,
) -> Result<SpdMatrix, KovaError> {
    let b = propagated_jacobian(p_pred, jacobian)?;
    innovation_from_propagated(&b, jacobian, p_n)
}

/// Kalman gain `K = P_pred J S⁻¹`, obtained by solving `S Kᵀ = (P_pred J)ᵀ`
/// with the `N x N` Cholesky factorization of `S` — the `d x d` predicted
/// covariance is never inverted.
pub fn kalman_gain(
    p_pred: &SpdMatrix,
    jacobian: &Array2<f64>,
    s: &SpdMatrix,
) -> Result<Array2<f64>, KovaError> {
    if s.dim() != jacobian.ncols() {
        return Err(KovaError::ShapeMismatch {
            expected: format!("{0} x {0} innovation covariance", jacobian.ncols()),
            got: format!("{0} x {0}", s.dim()),
        });
    }
    let b = propagated_jacobian(p_pred, jacobian)?;
    let kt = spd_solve(s, &b.t().to_owned())?;
    Ok(kt.t().to_owned())
}

/// Cheap per-step diagnostics computed from `N x N` quantities already on
/// hand inside the update; no extra model evaluations or `d x d` products.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KovaStepInfo {
    /// Regularized objective at the updated mean, evaluated on the
    /// *linearized* observation model (exact for linear `h`). At `α = 1`
    /// this is the classic `½ ιᵀ S⁻¹ ι`.
    pub ekf_objective: f64,
    /// Half mean squared innovation of the batch before the update.
    pub mle_objective: f64,
}

/// One full filter step on a batch, with α damping both updates:
/// `θ̂' = θ̂_pred + α K (y − h)` and `P' = sym(P_pred − α K S Kᵀ)`.
pub fn kova_step(
    state: &FilterState,
    batch: &ObservationBatch,
    cfg: &KovaConfig,
) -> Result<FilterState, KovaError> {
    Ok(kova_step_detailed(state, batch, cfg)?.0)
}

/// [`kova_step`] plus diagnostics.
///
/// The objective value uses the identities `S x = ι` (so the data residual of
/// the linearized model is `(1−α) ι + α P_n x`) and
/// `(θ̂'−θ̂_pred)ᵀ P_pred⁻¹ (θ̂'−θ̂_pred) = α² (ιᵀx − xᵀ P_n x)`,
/// keeping everything in batch-sized arithmetic.
pub fn kova_step_detailed(
    state: &FilterState,
    batch: &ObservationBatch,
    cfg: &KovaConfig,
) -> Result<(FilterState, KovaStepInfo), KovaError> {
    if batch.jacobian.nrows() != state.dim() {
        return Err(KovaError::ShapeMismatch {
            expected: format!("Jacobian with {} rows", state.dim()),
            got: format!("{}", batch.jacobian.nrows()),
        });
    }
    let alpha = cfg.learning_rate;
    let n = batch.len();
    let d = state.dim();
    let p_n = build_observation_noise(&cfg.noise.observation, n)?;

    // The evolution noise is folded into the products below instead of
    // materializing the d x d predicted covariance: `P_pred = factor·P +
    // var·I` with at most one of the two terms active, and the random-walk
    // mean carries over unchanged.
    let (factor, var) = match cfg.noise.evolution {
        EvolutionNoise::Zero => (1.0, 0.0),
        EvolutionNoise::FixedDiagonal(v) => (1.0, v),
        EvolutionNoise::FadingMemory(eta) => (1.0 + eta / (1.0 - eta), 0.0),
    };

    // b = P_pred J
    let mut b = Array2::zeros((d, n));
    general_mat_mul(factor, state.p.as_array(), &batch.jacobian, 0.0, &mut b);
    if var != 0.0 {
        b.scaled_add(var, &batch.jacobian);
    }

    let s = innovation_from_propagated(&b, &batch.jacobian, &p_n)?;
    let kt = spd_solve(&s, &b.t().to_owned())?; // Kᵀ, N x d
    let k = kt.t();

    let innovation = batch.innovation();
    let theta = &state.theta + &(k.dot(&innovation) * alpha);

    // P' = P_pred − α K S Kᵀ on the step's only d x d temporary: it first
    // holds K S Kᵀ, then the pairwise pass rewrites it in place.
    let ks = k.dot(s.as_array()); // d x N
    let mut p = ks.dot(&kt); // d x d
    posterior_covariance_in_place(&mut p, state.p.as_array(), factor, var, alpha);
    cap_covariance(&mut p, cfg.covariance_cap);

    let x = spd_solve_vec(&s, &innovation)?;
    let w = spd_solve_vec(&p_n, &innovation)?;
    let iota_x = innovation.dot(&x);
    let x_pn_x = x.dot(&p_n.as_array().dot(&x));
    let data = 0.5
        * ((1.0 - alpha) * (1.0 - alpha) * innovation.dot(&w)
            + 2.0 * alpha * (1.0 - alpha) * iota_x
            + alpha * alpha * x_pn_x);
    let reg = 0.5 * alpha * alpha * (iota_x - x_pn_x);
    let info = KovaStepInfo {
        ekf_objective: data + reg,
        mle_objective: mle_objective(batch),
    };

    Ok((
        FilterState {
            theta,
            p: SpdMatrix::from_symmetric_unchecked(p),
            step: state.step + 1,
        },
        info,
    ))
}

/// Regularized objective the filter step minimizes (for linear `h`):
/// `½ δᵀ P_n⁻¹ δ + ½ (θ − θ̂_pred)ᵀ P_pred⁻¹ (θ − θ̂_pred)`.
///
/// `batch` must have been rebuilt at `theta` (its predictions carry the
/// θ-dependence of `δ = y − h(u; θ)`). Passing `None` for `p_pred` is the
/// infinite-prior convention: the regularizer is dropped entirely, which is
/// the only sensible reading of a zero prior covariance.
pub fn ekf_objective(
    theta: &Array1<f64>,
    batch: &ObservationBatch,
    theta_pred: &Array1<f64>,
    p_pred: Option<&SpdMatrix>,
    p_n: &SpdMatrix,
) -> Result<f64, KovaError> {
    if p_n.dim() != batch.len() {
        return Err(KovaError::ShapeMismatch {
            expected: format!("{0} x {0} observation noise", batch.len()),
            got: format!("{0} x {0}", p_n.dim()),
        });
    }
    if theta.len() != theta_pred.len() {
        return Err(KovaError::ShapeMismatch {
            expected: format!("prediction mean of length {}", theta.len()),
            got: format!("{}", theta_pred.len()),
        });
    }
    let delta = batch.innovation();
    let data = 0.5 * delta.dot(&spd_solve_vec(p_n, &delta)?);
    let reg = match p_pred {
        Some(p) => {
            if p.dim() != theta.len() {
                return Err(KovaError::ShapeMismatch {
                    expected: format!("{0} x {0} prior covariance", theta.len()),
                    got: format!("{0} x {0}", p.dim()),
                });
            }
            let diff = theta - theta_pred;
            0.5 * diff.dot(&spd_solve_vec(p, &diff)?)
        }
        None => 0.0,
    };
    Ok(data + reg)
}

/// Half mean squared TD error `(1/2N) Σ δᵢ²` of a batch rebuilt at the
/// parameter vector under evaluation.
pub fn mle_objective(batch: &ObservationBatch) -> f64 {
    let delta = batch.innovation();
    delta.dot(&delta) / (2.0 * batch.len() as f64)
}

/// Checks the post-update covariance invariant: symmetric (by construction)
/// and no eigenvalue below `−1e-8 · trace/d`.
pub fn covariance_within_floor(p: &SpdMatrix) -> Result<bool, KovaError> {
    let floor = -1e-8 * p.trace() / p.dim() as f64;
    Ok(min_eigenvalue(p)? >= floor)
}

// --- Checkpoint serialization -----------------------------------------------
//
// Binary layout (all integers and floats little-endian):
//
//   magic          4 bytes  "KOVA"
//   version        u32      currently 1
//   learning rate  f64
//   p0 scale       f64
//   covariance cap f64
//   evolution      u8 tag (0 Zero, 1 FixedDiagonal, 2 FadingMemory) + f64 param
//   observation    u8 tag (0 BatchSize, 1 FixedDiagonal, 2 CustomDiagonal)
//                  + f64 param + (tag 2 only) u64 count + count f64 weights
//   d              u64
//   step           u64
//   theta          d f64
//   P              d*d f64, row-major
//
// Floats are stored bit-for-bit, so save → load is exact.

const CHECKPOINT_MAGIC: &[u8; 4] = b"KOVA";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes state and config to `path` in the documented binary layout.
pub fn save_checkpoint(
    path: &Path,
    state: &FilterState,
    cfg: &KovaConfig,
) -> Result<(), KovaError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&cfg.learning_rate.to_le_bytes())?;
    w.write_all(&cfg.initial_covariance_scale.to_le_bytes())?;
    w.write_all(&cfg.covariance_cap.to_le_bytes())?;
    let (ev_tag, ev_param) = match cfg.noise.evolution {
        EvolutionNoise::Zero => (0u8, 0.0),
        EvolutionNoise::FixedDiagonal(v) => (1, v),
        EvolutionNoise::FadingMemory(eta) => (2, eta),
    };
    w.write_all(&[ev_tag])?;
    w.write_all(&ev_param.to_le_bytes())?;
    match &cfg.noise.observation {
        ObservationNoise::BatchSize => {
            w.write_all(&[0u8])?;
            w.write_all(&0f64.to_le_bytes())?;
        }
        ObservationNoise::FixedDiagonal(v) => {
            w.write_all(&[1u8])?;
            w.write_all(&v.to_le_bytes())?;
        }
        ObservationNoise::CustomDiagonal(weights) => {
            w.write_all(&[2u8])?;
            w.write_all(&0f64.to_le_bytes())?;
            w.write_all(&(weights.len() as u64).to_le_bytes())?;
            for v in weights {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    let d = state.dim() as u64;
    w.write_all(&d.to_le_bytes())?;
    w.write_all(&state.step.to_le_bytes())?;
    for v in state.theta.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in state.p.as_array().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(FilterState, KovaConfig), KovaError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(KovaError::BadCheckpoint("wrong magic bytes".to_string()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(KovaError::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let learning_rate = read_f64(&mut r)?;
    let p0_scale = read_f64(&mut r)?;
    let covariance_cap = read_f64(&mut r)?;
    let ev_tag = read_u8(&mut r)?;
    let ev_param = read_f64(&mut r)?;
    let evolution = match ev_tag {
        0 => EvolutionNoise::Zero,
        1 => EvolutionNoise::FixedDiagonal(ev_param),
        2 => EvolutionNoise::FadingMemory(ev_param),
        t => return Err(KovaError::BadCheckpoint(format!("evolution tag {t}"))),
    };
    let ob_tag = read_u8(&mut r)?;
    let ob_param = read_f64(&mut r)?;
    let observation = match ob_tag {
        0 => ObservationNoise::BatchSize,
        1 => ObservationNoise::FixedDiagonal(ob_param),
        2 => {
            let count = read_u64(&mut r)? as usize;
            let mut weights = Vec::with_capacity(count);
            for _ in 0..count {
                weights.push(read_f64(&mut r)?);
            }
            ObservationNoise::CustomDiagonal(weights)
        }
        t => return Err(KovaError::BadCheckpoint(format!("observation tag {t}"))),
    };
    let d = read_u64(&mut r)? as usize;
    let step = read_u64(&mut r)?;
    let mut theta = Array1::zeros(d);
    for i in 0..d {
        theta[i] = read_f64(&mut r)?;
    }
    let mut p = Vec::with_capacity(d * d);
    for _ in 0..d * d {
        p.push(read_f64(&mut r)?);
    }
    let p = Array2::from_shape_vec((d, d), p)
        .map_err(|e| KovaError::BadCheckpoint(format!("covariance block: {e}")))?;
    let cfg = KovaConfig::new(
        learning_rate,
        p0_scale,
        NoiseSchedule::new(evolution, observation)?,
    )?
    .with_covariance_cap(covariance_cap)?;
    let mut state = FilterState::new(theta, SpdMatrix::new(p)?)?;
    state.step = step;
    Ok((state, cfg))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), KovaError> {
    r.read_exact(buf)
        .map_err(|_| KovaError::BadCheckpoint("unexpected end of file".to_string()))
}

fn read_u8(r: &mut impl Read) -> Result<u8, KovaError> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32, KovaError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, KovaError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, KovaError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
