//! Tabular Q-learning on the gridworld under a given reward table.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gridworld::{transition, Action, GridConfig, Observation};
use crate::reward_model::RewardTable;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            alpha: 0.1,
            gamma: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    grid: GridConfig,
    config: QConfig,
    values: Vec<f64>,
}

impl QTable {
    pub fn new(grid: GridConfig, config: QConfig) -> Self {
        Self {
            grid,
            config,
            values: vec![0.0; grid.state_count() * Action::COUNT],
        }
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn config(&self) -> &QConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn idx(&self, obs: Observation, a: Action) -> usize {
        self.grid.state_index(obs) * Action::COUNT + a.index()
    }

    pub fn get(&self, obs: Observation, a: Action) -> f64 {
        self.values[self.idx(obs, a)]
    }

    pub fn max_value(&self, obs: Observation) -> f64 {
        Action::ALL
            .iter()
            .map(|&a| self.get(obs, a))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Highest-valued action; ties go to the earliest action in
    /// [`Action::ALL`] order.
    pub fn greedy(&self, obs: Observation) -> Action {
        let mut best = Action::Up;
        for a in Action::ALL {
            if self.get(obs, a) > self.get(obs, best) {
                best = a;
            }
        }
        best
    }

    pub fn epsilon_greedy(&self, obs: Observation, rng: &mut impl Rng) -> Action {
        if rng.gen::<f64>() < self.config.epsilon {
            Action::from_index(rng.gen_range(0..Action::COUNT))
        } else {
            self.greedy(obs)
        }
    }

    /// One-step Q-learning backup.
    pub fn q_update(&mut self, obs: Observation, a: Action, r: f64, next: Observation) {
        let target = r + self.config.gamma * self.max_value(next);
        let i = self.idx(obs, a);
        self.values[i] += self.config.alpha * (target - self.values[i]);
    }

    /// Runs one ε-greedy episode of `len` steps from the start cell, learning
    /// online from `rewards`. Returns the visited `(observation, action)`s.
    pub fn episode(
        &mut self,
        rewards: &RewardTable,
        len: usize,
        rng: &mut impl Rng,
    ) -> Vec<(Observation, Action)> {
        let mut obs = self.grid.start();
        let mut visited = Vec::with_capacity(len);
        for _ in 0..len {
            let a = self.epsilon_greedy(obs, rng);
            let next = transition(obs, a, &self.grid);
            self.q_update(obs, a, rewards.get(obs, a), next);
            visited.push((obs, a));
            obs = next;
        }
        visited
    }

    /// Full synchronous Bellman backups over every state-action pair until
    /// the largest change drops below `tol` or `max_sweeps` is reached.
    /// Returns the number of sweeps performed.
    pub fn solve(&mut self, rewards: &RewardTable, tol: f64, max_sweeps: usize) -> usize {
        let grid = self.grid;
        for sweep in 1..=max_sweeps {
            let mut next = self.values.clone();
            let mut delta: f64 = 0.0;
            for cell in grid.cells() {
                for a in Action::ALL {
                    let i = self.idx(cell, a);
                    let v = rewards.get(cell, a) + self.config.gamma * self.max_value(transition(cell, a, &grid));
                    delta = delta.max((v - self.values[i]).abs());
                    next[i] = v;
                }
            }
            self.values = next;
            if delta < tol {
                return sweep;
            }
        }
        max_sweeps
    }

    /// Follows the greedy policy from the start cell for `max_steps` moves
    /// and returns the path including the start.
    pub fn greedy_path(&self, max_steps: usize) -> Vec<Observation> {
        let mut obs = self.grid.start();
        let mut path = vec![obs];
        for _ in 0..max_steps {
            obs = transition(obs, self.greedy(obs), &self.grid);
            path.push(obs);
        }
        path
    }
}
