//! First-order baselines: SGD and Adam on the half-mean-squared TD error.
//!
//! Both consume the same observation batches as the filter but ignore the
//! covariance machinery entirely — they descend the gradient of
//! `(1/2N) Σ (y_i − h(u_i; θ))²`, which is `−(1/N) J δ`.

use crate::optimizer::{KovaError, ObservationBatch};
use ndarray::Array1;

/// Gradient of the half-mean-squared TD error at the parameters the batch
/// was built at: `−(1/N) J (y − h)`.
pub fn mle_gradient(batch: &ObservationBatch) -> Array1<f64> {
    let delta = batch.innovation();
    batch.jacobian().dot(&delta) * (-1.0 / batch.len() as f64)
}

/// Plain gradient descent: `θ − lr · g`.
pub fn sgd_step(theta: &Array1<f64>, gradient: &Array1<f64>, lr: f64) -> Array1<f64> {
    theta - &(gradient * lr)
}

/// Learning-rate schedule applied on top of the base rate.
#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear decay from the base rate at step 0 to zero at `total_steps`
    /// (clamped there for any later step).
    LinearToZero {
        total_steps: u64,
    },
}

/// Adam accumulator state: biased first/second moment estimates and the
/// step counter driving bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Array1<f64>,
    v: Array1<f64>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    schedule: LrSchedule,
}

impl AdamState {
    /// Standard defaults: `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
    pub fn new(dim: usize, lr: f64, schedule: LrSchedule) -> Result<Self, KovaError> {
        Self::with_betas(dim, lr, 0.9, 0.999, 1e-8, schedule)
    }

    pub fn with_betas(
        dim: usize,
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        schedule: LrSchedule,
    ) -> Result<Self, KovaError> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(KovaError::InvalidConfig(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(KovaError::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(KovaError::InvalidConfig(format!(
                "epsilon must be > 0, got {epsilon}"
            )));
        }
        if let LrSchedule::LinearToZero { total_steps: 0 } = schedule {
            return Err(KovaError::InvalidConfig(
                "decay horizon must be at least 1 step".to_string(),
            ));
        }
        Ok(Self {
            m: Array1::zeros(dim),
            v: Array1::zeros(dim),
            t: 0,
            lr,
            beta1,
            beta2,
            epsilon,
            schedule,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// The rate the *next* step will use, after scheduling.
    pub fn current_lr(&self) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::LinearToZero { total_steps } => {
                let remaining = total_steps.saturating_sub(self.t) as f64;
                self.lr * remaining / total_steps as f64
            }
        }
    }
}

/// One bias-corrected moment update:
///
/// ```text
/// m ← β₁ m + (1−β₁) g        v ← β₂ v + (1−β₂) g²
/// θ' = θ − lr_t · m̂ / (√v̂ + ε),   m̂ = m/(1−β₁ᵗ),  v̂ = v/(1−β₂ᵗ)
/// ```
pub fn adam_step(
    state: &AdamState,
    theta: &Array1<f64>,
    gradient: &Array1<f64>,
) -> Result<(Array1<f64>, AdamState), KovaError> {
    if theta.len() != state.m.len() || gradient.len() != state.m.len() {
        return Err(KovaError::ShapeMismatch {
            expected: format!("vectors of length {}", state.m.len()),
            got: format!("theta {}, gradient {}", theta.len(), gradient.len()),
        });
    }
    let lr_t = state.current_lr();
    let mut next = state.clone();
    next.t = state.t + 1;
    next.m = &state.m * state.beta1 + &(gradient * (1.0 - state.beta1));
    next.v = &state.v * state.beta2 + &(gradient.mapv(|g| g * g) * (1.0 - state.beta2));
    let m_hat = &next.m / (1.0 - state.beta1.powi(next.t as i32));
    let v_hat = &next.v / (1.0 - state.beta2.powi(next.t as i32));
    let update = m_hat
        .iter()
        .zip(v_hat.iter())
        .map(|(mh, vh)| lr_t * mh / (vh.sqrt() + state.epsilon));
    let theta_next = theta
        .iter()
        .zip(update)
        .map(|(t, u)| t - u)
        .collect::<Array1<f64>>();
    Ok((theta_next, next))
}
