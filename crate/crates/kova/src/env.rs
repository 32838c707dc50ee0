//! Deterministic desk-scale environments.
//!
//! Two families: grid mazes where an agent pays for wandering (`-0.04` for a
//! fresh cell, `-0.25` for revisits and bumps, `+1` at the exit, episode lost
//! once the running total drops below a threshold), and a line-of-states
//! chain MDP whose value function under a fixed policy solves a small linear
//! system exactly — the oracle for policy-evaluation tests.

use ndarray::{Array1, Array2};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("maze layout: {0}")]
    BadLayout(String),
    #[error("episode already ended; reset before stepping again")]
    SteppedAfterTerminal,
    #[error("chain spec: {0}")]
    BadChain(String),
    #[error("value system is singular (pivot {pivot:.3e} at row {row})")]
    SingularSystem { row: usize, pivot: f64 },
}

/// Text form of the shipped 4 x 4 layout (`#` blocked, `.` free).
pub const FOUR_BY_FOUR_LAYOUT: &str = include_str!("../data/maze_4x4.txt");

/// Text form of the shipped 10 x 10 layout (`#` blocked, `.` free).
pub const TEN_BY_TEN_LAYOUT: &str = include_str!("../data/maze_10x10.txt");

/// Where episodes begin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartPolicy {
    /// Always cell `(0, 0)`.
    FixedTopLeft,
    /// Uniform over free cells, excluding the exit.
    RandomFreeCell,
}

/// The four grid moves, indexed in this order for action heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MazeAction {
    Up,
    Down,
    Right,
    Left,
}

impl MazeAction {
    pub const ALL: [MazeAction; 4] = [
        MazeAction::Up,
        MazeAction::Down,
        MazeAction::Right,
        MazeAction::Left,
    ];

    pub fn from_index(i: usize) -> Option<MazeAction> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        match self {
            MazeAction::Up => 0,
            MazeAction::Down => 1,
            MazeAction::Right => 2,
            MazeAction::Left => 3,
        }
    }

    fn delta(self) -> (isize, isize) {
        match self {
            MazeAction::Up => (-1, 0),
            MazeAction::Down => (1, 0),
            MazeAction::Right => (0, 1),
            MazeAction::Left => (0, -1),
        }
    }
}

/// How a step left the episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    /// Reached the exit; checked before the loss condition.
    Win,
    /// Cumulative reward fell below the loss threshold before the exit.
    Loss,
}

/// An `n x n` grid of free/blocked cells with the exit at the bottom-right.
///
/// Layouts parse from plain text: `#` blocked, `.` free, one row per line.
/// Validation requires a square grid, free start and exit cells, and the exit
/// reachable from every free cell (breadth-first search; grid moves are
/// symmetric, so reachability from the exit covers both directions).
#[derive(Debug, Clone, PartialEq)]
pub struct MazeSpec {
    n: usize,
    blocked: Vec<bool>,
    start_policy: StartPolicy,
    loss_threshold: f64,
}

impl MazeSpec {
    pub fn parse(text: &str, start_policy: StartPolicy) -> Result<Self, EnvError> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let n = rows.len();
        if n < 2 {
            return Err(EnvError::BadLayout(format!(
                "need at least a 2 x 2 grid, got {n} rows"
            )));
        }
        let mut blocked = vec![false; n * n];
        for (r, row) in rows.iter().enumerate() {
            let cells: Vec<char> = row.chars().collect();
            if cells.len() != n {
                return Err(EnvError::BadLayout(format!(
                    "row {r} has {} cells, expected {n}",
                    cells.len()
                )));
            }
            for (c, ch) in cells.iter().enumerate() {
                blocked[r * n + c] = match ch {
                    '#' => true,
                    '.' => false,
                    other => {
                        return Err(EnvError::BadLayout(format!(
                            "unknown cell character {other:?} at ({r}, {c})"
                        )));
                    }
                };
            }
        }
        let spec = Self {
            n,
            blocked,
            start_policy,
            loss_threshold: -50.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), EnvError> {
        let n = self.n;
        if self.blocked[0] && self.start_policy == StartPolicy::FixedTopLeft {
            return Err(EnvError::BadLayout(
                "start cell (0, 0) is blocked".to_string(),
            ));
        }
        if self.blocked[n * n - 1] {
            return Err(EnvError::BadLayout("exit cell is blocked".to_string()));
        }
        if !self.loss_threshold.is_finite() || self.loss_threshold >= 0.0 {
            return Err(EnvError::BadLayout(format!(
                "loss threshold must be a negative real, got {}",
                self.loss_threshold
            )));
        }
        // Flood fill from the exit: every free cell must be reached.
        let mut seen = vec![false; n * n];
        let mut queue = std::collections::VecDeque::new();
        seen[n * n - 1] = true;
        queue.push_back((n - 1, n - 1));
        while let Some((r, c)) = queue.pop_front() {
            for action in MazeAction::ALL {
                let (dr, dc) = action.delta();
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr as usize >= n || nc as usize >= n {
                    continue;
                }
                let idx = nr as usize * n + nc as usize;
                if !self.blocked[idx] && !seen[idx] {
                    seen[idx] = true;
                    queue.push_back((nr as usize, nc as usize));
                }
            }
        }
        for (idx, &reached) in seen.iter().enumerate() {
            if !self.blocked[idx] && !reached {
                return Err(EnvError::BadLayout(format!(
                    "free cell ({}, {}) cannot reach the exit",
                    idx / n,
                    idx % n
                )));
            }
        }
        Ok(())
    }

    /// The shipped 4 x 4 layout; episodes start at the top-left corner.
    pub fn four_by_four() -> Self {
        Self::parse(FOUR_BY_FOUR_LAYOUT, StartPolicy::FixedTopLeft)
            .expect("shipped 4 x 4 layout is valid")
    }

    /// The shipped 10 x 10 layout; episodes start at a random free cell.
    pub fn ten_by_ten() -> Self {
        Self::parse(TEN_BY_TEN_LAYOUT, StartPolicy::RandomFreeCell)
            .expect("shipped 10 x 10 layout is valid")
    }

    /// Replaces the default `-50` loss threshold.
    pub fn with_loss_threshold(mut self, threshold: f64) -> Result<Self, EnvError> {
        self.loss_threshold = threshold;
        self.validate()?;
        Ok(self)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Rendered feature length, `n²`.
    pub fn feature_len(&self) -> usize {
        self.n * self.n
    }

    pub fn start_policy(&self) -> StartPolicy {
        self.start_policy
    }

    pub fn loss_threshold(&self) -> f64 {
        self.loss_threshold
    }

    pub fn is_free(&self, row: usize, col: usize) -> bool {
        row < self.n && col < self.n && !self.blocked[row * self.n + col]
    }

    fn exit(&self) -> (usize, usize) {
        (self.n - 1, self.n - 1)
    }

    /// Fresh episode state with the start cell marked visited.
    pub fn reset(&self, rng: &mut impl Rng) -> MazeState {
        let position = match self.start_policy {
            StartPolicy::FixedTopLeft => (0, 0),
            StartPolicy::RandomFreeCell => {
                let candidates: Vec<(usize, usize)> = (0..self.n * self.n)
                    .filter(|&i| !self.blocked[i] && (i / self.n, i % self.n) != self.exit())
                    .map(|i| (i / self.n, i % self.n))
                    .collect();
                candidates[rng.gen_range(0..candidates.len())]
            }
        };
        let mut visited = vec![false; self.n * self.n];
        visited[position.0 * self.n + position.1] = true;
        MazeState {
            position,
            visited,
            cumulative_reward: 0.0,
            outcome: StepOutcome::Continue,
        }
    }
}

/// Per-episode maze state: agent position, visited set, running reward.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeState {
    position: (usize, usize),
    visited: Vec<bool>,
    cumulative_reward: f64,
    outcome: StepOutcome,
}

impl MazeState {
    pub fn position(&self) -> (usize, usize) {
        self.position
    }

    pub fn cumulative_reward(&self) -> f64 {
        self.cumulative_reward
    }

    pub fn outcome(&self) -> StepOutcome {
        self.outcome
    }

    pub fn is_over(&self) -> bool {
        self.outcome != StepOutcome::Continue
    }
}

const FRESH_CELL_REWARD: f64 = -0.04;
const REVISIT_REWARD: f64 = -0.25;
const EXIT_REWARD: f64 = 1.0;

/// Applies one move. Blocked and out-of-bounds moves leave the position
/// unchanged and are penalized as revisits; arriving at the exit wins (the
/// win check runs before the loss check); any other arrival pays the fresh
/// or revisit price and may trip the loss threshold.
pub fn maze_step(
    spec: &MazeSpec,
    state: &MazeState,
    action: MazeAction,
) -> Result<(MazeState, f64, StepOutcome), EnvError> {
    if state.is_over() {
        return Err(EnvError::SteppedAfterTerminal);
    }
    let n = spec.n;
    let (dr, dc) = action.delta();
    let (r, c) = state.position;
    let target = (r as isize + dr, c as isize + dc);
    let mut next = state.clone();

    let in_bounds =
        target.0 >= 0 && target.1 >= 0 && (target.0 as usize) < n && (target.1 as usize) < n;
    let reward;
    if in_bounds && spec.is_free(target.0 as usize, target.1 as usize) {
        let cell = (target.0 as usize, target.1 as usize);
        next.position = cell;
        if cell == spec.exit() {
            reward = EXIT_REWARD;
            next.cumulative_reward += reward;
            next.outcome = StepOutcome::Win;
            return Ok((next, reward, StepOutcome::Win));
        }
        let idx = cell.0 * n + cell.1;
        reward = if next.visited[idx] {
            REVISIT_REWARD
        } else {
            FRESH_CELL_REWARD
        };
        next.visited[idx] = true;
    } else {
        // Bumping a wall or the boundary stays put and counts as a revisit.
        reward = REVISIT_REWARD;
    }
    next.cumulative_reward += reward;
    if next.cumulative_reward < spec.loss_threshold {
        next.outcome = StepOutcome::Loss;
    }
    let outcome = next.outcome;
    Ok((next, reward, outcome))
}

/// Image-style features, flattened row-major: free `1.0`, blocked `0.0`,
/// agent cell `0.5`.
pub fn maze_render(spec: &MazeSpec, state: &MazeState) -> Array1<f64> {
    let n = spec.n;
    let mut out = Array1::zeros(n * n);
    for idx in 0..n * n {
        out[idx] = if spec.blocked[idx] { 0.0 } else { 1.0 };
    }
    out[state.position.0 * n + state.position.1] = 0.5;
    out
}

/// A line of `n` states with two actions (left, right), slip probability `p`
/// (the move goes the opposite way), clamped boundaries, per-state rewards,
/// and discount `γ < 1`. Reward depends on the departed state only.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMdpSpec {
    n: usize,
    slip: f64,
    rewards: Vec<f64>,
    gamma: f64,
}

/// Chain actions: `0` moves left, `1` moves right (before slip).
pub const CHAIN_LEFT: usize = 0;
pub const CHAIN_RIGHT: usize = 1;

impl ChainMdpSpec {
    pub fn new(n: usize, slip: f64, rewards: Vec<f64>, gamma: f64) -> Result<Self, EnvError> {
        if n == 0 {
            return Err(EnvError::BadChain("need at least one state".to_string()));
        }
        if !(slip.is_finite() && (0.0..1.0).contains(&slip)) {
            return Err(EnvError::BadChain(format!(
                "slip probability must lie in [0, 1), got {slip}"
            )));
        }
        if !(gamma.is_finite() && (0.0..1.0).contains(&gamma)) {
            return Err(EnvError::BadChain(format!(
                "discount must lie in [0, 1), got {gamma}"
            )));
        }
        if rewards.len() != n || !rewards.iter().all(|r| r.is_finite()) {
            return Err(EnvError::BadChain(format!(
                "need {n} finite per-state rewards"
            )));
        }
        Ok(Self {
            n,
            slip,
            rewards,
            gamma,
        })
    }

    pub fn states(&self) -> usize {
        self.n
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// One-hot (tabular) features for a state.
    pub fn one_hot(&self, state: usize) -> Array1<f64> {
        let mut out = Array1::zeros(self.n);
        out[state] = 1.0;
        out
    }

    /// Samples one transition: reward for the departed state, then a slip-
    /// perturbed move with clamped boundaries.
    pub fn step(&self, state: usize, action: usize, rng: &mut impl Rng) -> (usize, f64) {
        debug_assert!(state < self.n && action < 2);
        let reward = self.rewards[state];
        let intended_right = action == CHAIN_RIGHT;
        let goes_right = if rng.gen_bool(self.slip) {
            !intended_right
        } else {
            intended_right
        };
        let next = if goes_right {
            (state + 1).min(self.n - 1)
        } else {
            state.saturating_sub(1)
        };
        (next, reward)
    }

    /// Row-stochastic transition matrix under a fixed policy; `policy[s]` is
    /// `(P(left | s), P(right | s))`.
    pub fn policy_transition_matrix(&self, policy: &[[f64; 2]]) -> Result<Array2<f64>, EnvError> {
        if policy.len() != self.n {
            return Err(EnvError::BadChain(format!(
                "policy rows {} != state count {}",
                policy.len(),
                self.n
            )));
        }
        let mut p = Array2::zeros((self.n, self.n));
        for (s, probs) in policy.iter().enumerate() {
            if probs.iter().any(|q| !(q.is_finite() && *q >= 0.0))
                || (probs[0] + probs[1] - 1.0).abs() > 1e-12
            {
                return Err(EnvError::BadChain(format!(
                    "policy row {s} is not a distribution: {probs:?}"
                )));
            }
            let p_right = probs[CHAIN_RIGHT] * (1.0 - self.slip) + probs[CHAIN_LEFT] * self.slip;
            let p_left = 1.0 - p_right;
            let right_state = (s + 1).min(self.n - 1);
            let left_state = s.saturating_sub(1);
            p[[s, right_state]] += p_right;
            p[[s, left_state]] += p_left;
        }
        Ok(p)
    }
}

/// Exact value function of a fixed policy: solves `(I − γ P^π) V = R` by
/// Gaussian elimination with partial pivoting. The system is strictly
/// diagonally dominant for `γ < 1`, so the singular branch is defensive.
pub fn chain_exact_value(
    spec: &ChainMdpSpec,
    policy: &[[f64; 2]],
) -> Result<Array1<f64>, EnvError> {
    let n = spec.n;
    let p = spec.policy_transition_matrix(policy)?;
    let mut a: Array2<f64> = Array2::eye(n) - &(&p * spec.gamma);
    let mut b = Array1::from(spec.rewards.clone());

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .expect("non-empty pivot range");
        if a[[pivot_row, col]].abs() < 1e-12 {
            return Err(EnvError::SingularSystem {
                row: col,
                pivot: a[[pivot_row, col]],
            });
        }
        if pivot_row != col {
            for c in 0..n {
                a.swap([pivot_row, c], [col, c]);
            }
            b.swap(pivot_row, col);
        }
        for row in col + 1..n {
            let f = a[[row, col]] / a[[col, col]];
            if f != 0.0 {
                for c in col..n {
                    let v = a[[col, c]];
                    a[[row, c]] -= f * v;
                }
                let bv = b[col];
                b[row] -= f * bv;
            }
        }
    }
    let mut v = Array1::zeros(n);
    for row in (0..n).rev() {
        let mut acc = b[row];
        for c in row + 1..n {
            acc -= a[[row, c]] * v[c];
        }
        v[row] = acc / a[[row, row]];
    }
    Ok(v)
}
