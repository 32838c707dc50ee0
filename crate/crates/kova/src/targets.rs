//! Bellman target-label constructors and the sample generator feeding them.
//!
//! A target label `y(u)` is the regression target the filter observes for one
//! transition or trajectory position: the bootstrapped quantity on the
//! right-hand side of a Bellman backup, built with *frozen* target parameters
//! `θ'` so the label does not move with the parameters being trained. The
//! only sanctioned use of the online `θ` is double-Q action selection.
//!
//! Transitions come from a ring [`ReplayBuffer`] (uniform sampling without
//! replacement within a batch) or from whole [`Trajectory`] records for the
//! k-step and advantage constructors that need ordered suffixes.

use crate::model::{ModelError, ModelInput, ValueModel};
use crate::optimizer::{KovaError, ObservationBatch};
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("replay buffer holds {have} transitions, need {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("empty trajectory slice")]
    EmptySlice,
    #[error("index {index} out of range for trajectory of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid target spec: {0}")]
    InvalidSpec(String),
    #[error("transition {at} does not continue from the previous next state")]
    BrokenChain { at: usize },
    #[error("cannot extend a trajectory past its terminal step")]
    PastTerminal,
    #[error("transition contains a non-finite value")]
    NonFinite,
    #[error("state-value target needs a single-head model, got {got} heads")]
    HeadCount { got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Batch(#[from] KovaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("trajectory file line {line}: {message}")]
    BadRecord { line: usize, message: String },
}

/// One environment step: `(s, a, r, s', terminal)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

impl Transition {
    fn check_finite(&self) -> Result<(), TargetError> {
        let ok = self.reward.is_finite()
            && self.state.iter().all(|v| v.is_finite())
            && self.next_state.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(TargetError::NonFinite)
        }
    }

    fn state_features(&self) -> Array1<f64> {
        Array1::from(self.state.clone())
    }

    fn next_state_features(&self) -> Array1<f64> {
        Array1::from(self.next_state.clone())
    }
}

/// Ordered transitions from one episode under one policy: step `i`'s next
/// state is step `i+1`'s state, and the sequence ends at a terminal step or
/// at the collection horizon.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    steps: Vec<Transition>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tr: Transition) -> Result<(), TargetError> {
        tr.check_finite()?;
        if let Some(last) = self.steps.last() {
            if last.terminal {
                return Err(TargetError::PastTerminal);
            }
            if last.next_state != tr.state {
                return Err(TargetError::BrokenChain {
                    at: self.steps.len(),
                });
            }
        }
        self.steps.push(tr);
        Ok(())
    }

    pub fn steps(&self) -> &[Transition] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// True when the episode reached a terminal state (not a horizon cut).
    pub fn ends_terminal(&self) -> bool {
        self.steps.last().is_some_and(|tr| tr.terminal)
    }
}

/// Ring buffer of transitions with seeded uniform sampling.
///
/// Sampling within one batch is without replacement; separate batches are
/// independent draws (with replacement across batches).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    ring: Vec<Transition>,
    next: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self, TargetError> {
        if capacity == 0 {
            return Err(TargetError::InvalidSpec(
                "replay capacity must be at least 1".to_string(),
            ));
        }
        Ok(Self {
            capacity,
            ring: Vec::with_capacity(capacity.min(4096)),
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Inserts a transition, evicting the oldest once at capacity.
    pub fn push(&mut self, tr: Transition) -> Result<(), TargetError> {
        tr.check_finite()?;
        if self.ring.len() < self.capacity {
            self.ring.push(tr);
        } else {
            self.ring[self.next] = tr;
            self.next = (self.next + 1) % self.capacity;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Uniform sample of `n` distinct positions in the live region.
    fn sample_indices(&mut self, n: usize) -> Result<Vec<usize>, TargetError> {
        if self.ring.len() < n {
            return Err(TargetError::InsufficientData {
                have: self.ring.len(),
                need: n,
            });
        }
        Ok(rand::seq::index::sample(&mut self.rng, self.ring.len(), n).into_vec())
    }
}

/// Which Bellman backup produces the target labels.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    /// `r + γ max_a Q(s', a; θ')`.
    DqnMax { gamma: f64 },
    /// `r + γ Q(s', argmax_a Q(s', a; θ); θ')` — selection online, evaluation
    /// frozen. The default for maze control.
    DoubleQ { gamma: f64 },
    /// `Σ_{i<k} γ^i r_{m+i} + γ^k V(s_{m+k}; θ')`, truncated at terminal.
    KStepV { gamma: f64, k: usize },
    /// `Σ_i (γλ)^i δ_{m+i} + V(s_m; θ')` with `δ_i = r_i + γV(s'_i) − V(s_i)`.
    Gae { gamma: f64, lambda: f64 },
}

impl TargetSpec {
    pub fn validate(&self) -> Result<(), TargetError> {
        let gamma = self.gamma();
        if !(gamma.is_finite() && (0.0..1.0).contains(&gamma)) {
            return Err(TargetError::InvalidSpec(format!(
                "discount must lie in [0, 1), got {gamma}"
            )));
        }
        match self {
            TargetSpec::KStepV { k, .. } if *k == 0 => Err(TargetError::InvalidSpec(
                "k-step horizon must be at least 1".to_string(),
            )),
            TargetSpec::Gae { lambda, .. }
                if !(lambda.is_finite() && (0.0..=1.0).contains(lambda)) =>
            {
                Err(TargetError::InvalidSpec(format!(
                    "lambda must lie in [0, 1], got {lambda}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            TargetSpec::DqnMax { gamma }
            | TargetSpec::DoubleQ { gamma }
            | TargetSpec::KStepV { gamma, .. }
            | TargetSpec::Gae { gamma, .. } => *gamma,
        }
    }
}

fn max_q(q: &Array1<f64>) -> f64 {
    q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn argmax_lowest(q: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate().skip(1) {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

/// Max-bootstrap Q target `r + γ max_a Q(s', a; θ')`; a terminal transition's
/// target is its reward exactly.
pub fn dqn_target(
    tr: &Transition,
    model: &ValueModel,
    theta_target: &Array1<f64>,
    gamma: f64,
) -> Result<f64, TargetError> {
    if tr.terminal {
        return Ok(tr.reward);
    }
    let q = model.q_values(theta_target, &tr.next_state_features())?;
    Ok(tr.reward + gamma * max_q(&q))
}

/// Double-Q target: the bootstrap action is chosen by the online parameters
/// (ties broken toward the lowest index) but evaluated with the frozen ones.
pub fn double_q_target(
    tr: &Transition,
    model: &ValueModel,
    theta_online: &Array1<f64>,
    theta_target: &Array1<f64>,
    gamma: f64,
) -> Result<f64, TargetError> {
    if tr.terminal {
        return Ok(tr.reward);
    }
    let next = tr.next_state_features();
    let chosen = argmax_lowest(&model.q_values(theta_online, &next)?);
    let q_frozen = model.q_values(theta_target, &next)?;
    Ok(tr.reward + gamma * q_frozen[chosen])
}

fn state_value(
    model: &ValueModel,
    theta: &Array1<f64>,
    features: &Array1<f64>,
) -> Result<f64, TargetError> {
    if model.heads() != 1 {
        return Err(TargetError::HeadCount { got: model.heads() });
    }
    Ok(model.q_values(theta, features)?[0])
}

/// k-step value target over a trajectory suffix: discounted rewards for up to
/// `k` steps, then a `γ^k V(·; θ')` bootstrap. The bootstrap is suppressed if
/// a terminal step is reached first, and taken early if the slice runs out.
pub fn k_step_v_target(
    slice: &[Transition],
    model: &ValueModel,
    theta_target: &Array1<f64>,
    gamma: f64,
    k: usize,
) -> Result<f64, TargetError> {
    if slice.is_empty() {
        return Err(TargetError::EmptySlice);
    }
    if k == 0 {
        return Err(TargetError::InvalidSpec(
            "k-step horizon must be at least 1".to_string(),
        ));
    }
    let mut total = 0.0;
    let mut discount = 1.0;
    let steps = k.min(slice.len());
    for tr in &slice[..steps] {
        total += discount * tr.reward;
        discount *= gamma;
        if tr.terminal {
            return Ok(total);
        }
    }
    let boot = state_value(model, theta_target, &slice[steps - 1].next_state_features())?;
    Ok(total + discount * boot)
}

/// Advantage-weighted value target at position `m`:
/// `Σ_i (γλ)^i δ_{m+i} + V(s_m; θ')`, accumulated by backward recursion over
/// the rest of the episode with `V(terminal) = 0`.
///
/// `λ = 0` is evaluated in its telescoped one-step form `r + γ V(s'; θ')`, so
/// the identity with [`k_step_v_target`] at `k = 1` holds exactly.
pub fn gae_target(
    traj: &Trajectory,
    m: usize,
    model: &ValueModel,
    theta_target: &Array1<f64>,
    gamma: f64,
    lambda: f64,
) -> Result<f64, TargetError> {
    let steps = traj.steps();
    if m >= steps.len() {
        return Err(TargetError::IndexOutOfRange {
            index: m,
            len: steps.len(),
        });
    }
    let bootstrap = |tr: &Transition| -> Result<f64, TargetError> {
        if tr.terminal {
            Ok(0.0)
        } else {
            state_value(model, theta_target, &tr.next_state_features())
        }
    };
    if lambda == 0.0 {
        let tr = &steps[m];
        return Ok(tr.reward + gamma * bootstrap(tr)?);
    }
    let mut advantage = 0.0;
    for tr in steps[m..].iter().rev() {
        let delta = tr.reward + gamma * bootstrap(tr)?
            - state_value(model, theta_target, &tr.state_features())?;
        advantage = delta + gamma * lambda * advantage;
    }
    Ok(advantage + state_value(model, theta_target, &steps[m].state_features())?)
}

/// Draws `n` transitions uniformly without replacement and assembles the
/// filter observation: targets per `spec`, predictions and Jacobian at the
/// online `theta`.
///
/// Returns the batch together with the number of whole-batch model sweeps it
/// cost: one sweep for predictions + Jacobian, one for the frozen-parameter
/// bootstrap, plus one more for double-Q action selection.
///
/// Only the single-transition constructors apply here (`DqnMax`, `DoubleQ`,
/// and `KStepV` with `k = 1`); deeper lookaheads need ordered trajectories —
/// see [`trajectory_targets`].
pub fn sample_batch(
    buffer: &mut ReplayBuffer,
    n: usize,
    spec: &TargetSpec,
    model: &ValueModel,
    theta_online: &Array1<f64>,
    theta_target: &Array1<f64>,
) -> Result<(ObservationBatch, u64), TargetError> {
    spec.validate()?;
    let indices = buffer.sample_indices(n)?;
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Array1::zeros(n);
    let mut sweeps = 2; // predictions + Jacobian sweep, frozen-bootstrap sweep
    for (row, &idx) in indices.iter().enumerate() {
        let tr = &buffer.ring[idx];
        let (input, y) = match spec {
            TargetSpec::DqnMax { gamma } => (
                ModelInput::state_action(tr.state_features(), tr.action),
                dqn_target(tr, model, theta_target, *gamma)?,
            ),
            TargetSpec::DoubleQ { gamma } => (
                ModelInput::state_action(tr.state_features(), tr.action),
                double_q_target(tr, model, theta_online, theta_target, *gamma)?,
            ),
            TargetSpec::KStepV { gamma, k: 1 } => (
                ModelInput::state(tr.state_features()),
                k_step_v_target(std::slice::from_ref(tr), model, theta_target, *gamma, 1)?,
            ),
            TargetSpec::KStepV { .. } | TargetSpec::Gae { .. } => {
                return Err(TargetError::InvalidSpec(
                    "multi-step targets need ordered trajectories, not replay samples".to_string(),
                ));
            }
        };
        inputs.push(input);
        targets[row] = y;
    }
    if matches!(spec, TargetSpec::DoubleQ { .. }) {
        sweeps += 1; // online-parameter action-selection sweep
    }
    let batch = ObservationBatch::at_parameters(model, theta_online, inputs, targets)?;
    Ok((batch, sweeps))
}

/// Labels every position of a trajectory with the configured value target.
/// Returns `(input, target)` pairs in episode order, ready for batching.
pub fn trajectory_targets(
    traj: &Trajectory,
    spec: &TargetSpec,
    model: &ValueModel,
    theta_target: &Array1<f64>,
) -> Result<Vec<(ModelInput, f64)>, TargetError> {
    spec.validate()?;
    let steps = traj.steps();
    let mut out = Vec::with_capacity(steps.len());
    for m in 0..steps.len() {
        let y = match spec {
            TargetSpec::KStepV { gamma, k } => {
                k_step_v_target(&steps[m..], model, theta_target, *gamma, *k)?
            }
            TargetSpec::Gae { gamma, lambda } => {
                gae_target(traj, m, model, theta_target, *gamma, *lambda)?
            }
            TargetSpec::DqnMax { .. } | TargetSpec::DoubleQ { .. } => {
                return Err(TargetError::InvalidSpec(
                    "action-value targets are sampled from replay, not trajectories".to_string(),
                ));
            }
        };
        out.push((ModelInput::state(steps[m].state_features()), y));
    }
    Ok(out)
}

// --- Trajectory dumps --------------------------------------------------------
//
// One JSON object per line, one line per transition, fields in this order:
//
//   {"episode": u, "state": [...], "action": a, "reward": r,
//    "next_state": [...], "terminal": b}
//
// `episode` groups lines back into trajectories on load; lines of one episode
// are contiguous and in step order.

#[derive(Debug, Serialize, Deserialize)]
struct TransitionRecord {
    episode: usize,
    state: Vec<f64>,
    action: usize,
    reward: f64,
    next_state: Vec<f64>,
    terminal: bool,
}

/// Writes trajectories as line-delimited JSON in the documented schema.
pub fn dump_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), TargetError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (episode, traj) in trajectories.iter().enumerate() {
        for tr in traj.steps() {
            let record = TransitionRecord {
                episode,
                state: tr.state.clone(),
                action: tr.action,
                reward: tr.reward,
                next_state: tr.next_state.clone(),
                terminal: tr.terminal,
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| TargetError::InvalidSpec(format!("serialization failed: {e}")))?;
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dump produced by [`dump_trajectories`], revalidating the chain
/// invariants of every episode.
pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>, TargetError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out: Vec<Trajectory> = Vec::new();
    let mut current_episode: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TransitionRecord =
            serde_json::from_str(&line).map_err(|e| TargetError::BadRecord {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if current_episode != Some(record.episode) {
            current_episode = Some(record.episode);
            out.push(Trajectory::new());
        }
        out.last_mut()
            .expect("an episode was just opened")
            .push(Transition {
                state: record.state,
                action: record.action,
                reward: record.reward,
                next_state: record.next_state,
                terminal: record.terminal,
            })
            .map_err(|e| TargetError::BadRecord {
                line: lineno + 1,
                message: e.to_string(),
            })?;
    }
    Ok(out)
}
