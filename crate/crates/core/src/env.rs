//! Episodic environments for training and the random-MDP generator used by
//! the theory sweeps.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// Outcome of one environment transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub next_state: usize,
    pub reward: f64,
    /// Episode reached an absorbing state (goal or cliff).
    pub terminated: bool,
    /// Step limit reached without termination.
    pub truncated: bool,
    pub cliff_fall: bool,
}

/// A discrete episodic environment.
pub trait Environment {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Start a new episode; returns the initial state.
    fn reset(&mut self, seed: u64) -> usize;
    fn step(&mut self, action: usize) -> Result<StepResult>;
    /// Steps taken in the current episode.
    fn elapsed(&self) -> usize;
}

/// Grid moves, in action-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Up = 0,
    Right = 1,
    Down = 2,
    Left = 3,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::Up, Move::Right, Move::Down, Move::Left];
}

/// Layout and reward structure of a cliff gridworld. Cells are numbered
/// row-major from the top-left corner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub start: usize,
    pub goal: usize,
    pub cliff_cells: BTreeSet<usize>,
    pub step_reward: f64,
    pub cliff_reward: f64,
    pub goal_reward: f64,
    pub max_episode_steps: usize,
}

impl Default for GridSpec {
    /// The standard 4 × 12 layout: start bottom-left, goal bottom-right, cliff
    /// in between.
    fn default() -> Self {
        let (height, width) = (4, 12);
        let bottom = (height - 1) * width;
        Self {
            height,
            width,
            start: bottom,
            goal: bottom + width - 1,
            cliff_cells: (bottom + 1..bottom + width - 1).collect(),
            step_reward: -1.0,
            cliff_reward: -100.0,
            goal_reward: 0.0,
            max_episode_steps: 200,
        }
    }
}

impl GridSpec {
    pub fn n_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_cells();
        if n == 0 {
            return Err(Error::InvalidParameter {
                name: "grid",
                detail: "height and width must be positive".into(),
            });
        }
        for (name, cell) in [("start", self.start), ("goal", self.goal)] {
            if cell >= n {
                return Err(Error::InvalidParameter {
                    name,
                    detail: format!("cell {cell} outside a grid of {n} cells"),
                });
            }
            if self.cliff_cells.contains(&cell) {
                return Err(Error::InvalidParameter {
                    name,
                    detail: format!("cell {cell} is a cliff cell"),
                });
            }
        }
        if let Some(c) = self.cliff_cells.iter().find(|c| **c >= n) {
            return Err(Error::InvalidParameter {
                name: "cliff_cells",
                detail: format!("cell {c} outside a grid of {n} cells"),
            });
        }
        if self.max_episode_steps == 0 {
            return Err(Error::InvalidParameter {
                name: "max_episode_steps",
                detail: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Cell reached by `mv` from `cell`, clipped at the borders.
    pub fn neighbour(&self, cell: usize, mv: Move) -> usize {
        let (row, col) = (cell / self.width, cell % self.width);
        let (row, col) = match mv {
            Move::Up => (row.saturating_sub(1), col),
            Move::Down => ((row + 1).min(self.height - 1), col),
            Move::Left => (row, col.saturating_sub(1)),
            Move::Right => (row, (col + 1).min(self.width - 1)),
        };
        row * self.width + col
    }

    pub fn is_terminal(&self, cell: usize) -> bool {
        cell == self.goal || self.cliff_cells.contains(&cell)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("grid spec always serializes")
    }
}

/// Deterministic cliff gridworld.
#[derive(Debug, Clone)]
pub struct CliffWalking {
    spec: GridSpec,
    position: usize,
    steps: usize,
}

impl CliffWalking {
    pub fn new(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let position = spec.start;
        Ok(Self {
            spec,
            position,
            steps: 0,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn position(&self) -> usize {
        self.position
    }
}

impl Environment for CliffWalking {
    fn n_states(&self) -> usize {
        self.spec.n_cells()
    }

    fn n_actions(&self) -> usize {
        Move::ALL.len()
    }

    fn reset(&mut self, _seed: u64) -> usize {
        self.position = self.spec.start;
        self.steps = 0;
        self.position
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        let mv = *Move::ALL.get(action).ok_or(Error::InvalidAction {
            action,
            n_actions: Move::ALL.len(),
        })?;
        let next = self.spec.neighbour(self.position, mv);
        self.position = next;
        self.steps += 1;
        let cliff_fall = self.spec.cliff_cells.contains(&next);
        let (reward, terminated) = if cliff_fall {
            (self.spec.cliff_reward, true)
        } else if next == self.spec.goal {
            (self.spec.goal_reward, true)
        } else {
            (self.spec.step_reward, false)
        };
        Ok(StepResult {
            next_state: next,
            reward,
            terminated,
            truncated: !terminated && self.steps >= self.spec.max_episode_steps,
            cliff_fall,
        })
    }

    fn elapsed(&self) -> usize {
        self.steps
    }
}

/// Exact tabular encoding of a cliff gridworld. Goal and cliff cells become
/// absorbing, zero-reward states; the step limit is not represented.
pub fn cliffwalking_as_mdp(spec: &GridSpec, gamma: f64) -> Result<TabularMdp> {
    spec.validate()?;
    let n = spec.n_cells();
    let na = Move::ALL.len();
    let mut transition = vec![0.0; n * na * n];
    let mut reward = vec![0.0; n * na];
    for cell in 0..n {
        for (a, mv) in Move::ALL.iter().enumerate() {
            let base = (cell * na + a) * n;
            if spec.is_terminal(cell) {
                transition[base + cell] = 1.0;
                continue;
            }
            let next = spec.neighbour(cell, *mv);
            transition[base + next] = 1.0;
            reward[cell * na + a] = if spec.cliff_cells.contains(&next) {
                spec.cliff_reward
            } else if next == spec.goal {
                spec.goal_reward
            } else {
                spec.step_reward
            };
        }
    }
    let mut initial = vec![0.0; n];
    initial[spec.start] = 1.0;
    TabularMdp::new(n, na, transition, reward, gamma, initial)
}

/// Samples trajectories from a [`TabularMdp`], truncating episodes after
/// `max_episode_steps`.
#[derive(Debug, Clone)]
pub struct MdpEnv {
    mdp: TabularMdp,
    max_episode_steps: usize,
    rng: ChaCha8Rng,
    state: usize,
    steps: usize,
}

impl MdpEnv {
    pub fn new(mdp: TabularMdp, max_episode_steps: usize) -> Result<Self> {
        if max_episode_steps == 0 {
            return Err(Error::InvalidParameter {
                name: "max_episode_steps",
                detail: "must be at least 1".into(),
            });
        }
        Ok(Self {
            mdp,
            max_episode_steps,
            rng: ChaCha8Rng::seed_from_u64(0),
            state: 0,
            steps: 0,
        })
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }
}

pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` just below 1; fall back to the last supported entry.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

impl Environment for MdpEnv {
    fn n_states(&self) -> usize {
        self.mdp.n_states()
    }

    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn reset(&mut self, seed: u64) -> usize {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.steps = 0;
        self.state = sample_index(self.mdp.initial_dist(), &mut self.rng);
        self.state
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if action >= self.mdp.n_actions() {
            return Err(Error::InvalidAction {
                action,
                n_actions: self.mdp.n_actions(),
            });
        }
        let reward = self.mdp.reward(self.state, action);
        let next = sample_index(self.mdp.next_dist(self.state, action), &mut self.rng);
        self.state = next;
        self.steps += 1;
        Ok(StepResult {
            next_state: next,
            reward,
            terminated: false,
            truncated: self.steps >= self.max_episode_steps,
            cliff_fall: false,
        })
    }

    fn elapsed(&self) -> usize {
        self.steps
    }
}

/// Derives an independent seed for a named stream (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn dirichlet_ones<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

/// Random MDP: Dirichlet(1,…,1) transition rows and start distribution,
/// rewards uniform on `[-1, 1]`.
pub fn random_mdp(seed: u64, n_states: usize, n_actions: usize, gamma: f64) -> Result<TabularMdp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transition.extend(dirichlet_ones(n_states, &mut rng));
    }
    let reward = (0..n_states * n_actions)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    let initial = dirichlet_ones(n_states, &mut rng);
    TabularMdp::new(n_states, n_actions, transition, reward, gamma, initial)
}

/// Random stochastic policy with Dirichlet(1,…,1) rows.
pub fn random_policy<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> crate::mdp::TabularPolicy {
    let probs = (0..n_states).flat_map(|_| dirichlet_ones(n_actions, rng)).collect();
    crate::mdp::TabularPolicy::new(n_states, n_actions, probs).expect("normalized Dirichlet rows are valid")
}
