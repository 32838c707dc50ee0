//! Kalman Optimization for Value Approximation.
//!
//! This crate treats the parameters of a value-function approximator as a
//! random variable and tracks their posterior mean and covariance with an
//! extended Kalman filter. One filter step conditions the current Gaussian
//! belief on a batch of Bellman targets, which regularizes the usual
//! squared-TD-error fit toward the previous estimate and yields an online,
//! uncertainty-aware alternative to stochastic gradient optimizers.
//!
//! Module map:
//!
//! * [`linalg`] — dense symmetric linear algebra: Cholesky factorization,
//!   SPD solves, symmetrization, smallest-eigenvalue bounds.
//! * [`model`] — linear and MLP value approximators with exact batch
//!   Jacobians and a flat parameter layout.
//! * [`optimizer`] — the Kalman filter step itself: predict, innovation
//!   covariance, gain, damped mean/covariance update, checkpointing.
//! * [`targets`] — Bellman target constructors (max, double-Q, k-step,
//!   generalized advantage) plus transitions, trajectories, and replay.
//! * [`env`] — a deterministic grid maze and a stochastic chain MDP with an
//!   exact policy-evaluation solver.
//! * [`ktd`] — an unscented-filter temporal-difference baseline that pays
//!   `2(2d+1)` model evaluations per step.
//! * [`baselines`] — Adam and SGD steps on the batch squared-error gradient.
//! * [`trainer`] — double-Q control and policy-evaluation loops with
//!   reproducible seeding and streamed metrics.
//! * [`verify`] — self-contained verification suites that check the filter
//!   against independent reference computations.

// Links the system BLAS that backs ndarray's matrix products.
use blas_src as _;

pub mod baselines;
pub mod env;
pub mod ktd;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod targets;
pub mod trainer;
pub mod verify;
