//! Deterministic N×N gridworld: start in the top-left corner, goal in the
//! bottom-right, reward equal to the negative Manhattan distance to the goal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid side length must be at least 2, got {0}")]
    TooSmall(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    n: usize,
}

impl GridConfig {
    pub fn new(n: usize) -> Result<Self, GridError> {
        if n < 2 {
            return Err(GridError::TooSmall(n));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn start(&self) -> Observation {
        Observation { row: 0, col: 0 }
    }

    pub fn goal(&self) -> Observation {
        Observation {
            row: self.n - 1,
            col: self.n - 1,
        }
    }

    pub fn state_count(&self) -> usize {
        self.n * self.n
    }

    pub fn state_index(&self, obs: Observation) -> usize {
        obs.row * self.n + obs.col
    }

    pub fn observation(&self, index: usize) -> Observation {
        Observation {
            row: index / self.n,
            col: index % self.n,
        }
    }

    /// All cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = Observation> + '_ {
        (0..self.state_count()).map(|i| self.observation(i))
    }

    /// Length of a shortest path from start to goal.
    pub fn shortest_path_len(&self) -> usize {
        2 * (self.n - 1)
    }

    pub fn contains(&self, obs: Observation) -> bool {
        obs.row < self.n && obs.col < self.n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Observation {
    pub row: usize,
    pub col: usize,
}

impl Observation {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Action {
        Self::ALL[i]
    }
}

pub const SYMBOL_NAMES: [&str; 8] = [
    "at_top_edge",
    "at_left_edge",
    "at_right_edge",
    "at_bottom_edge",
    "at_top_left_corner",
    "at_top_right_corner",
    "at_bottom_left_corner",
    "at_bottom_right_corner",
];

/// Boolean predicates over a cell, in [`SYMBOL_NAMES`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymbolVector(pub [bool; 8]);

impl SymbolVector {
    pub const LEN: usize = 8;

    pub fn top_edge(&self) -> bool {
        self.0[0]
    }
    pub fn left_edge(&self) -> bool {
        self.0[1]
    }
    pub fn right_edge(&self) -> bool {
        self.0[2]
    }
    pub fn bottom_edge(&self) -> bool {
        self.0[3]
    }
    pub fn top_left_corner(&self) -> bool {
        self.0[4]
    }
    pub fn top_right_corner(&self) -> bool {
        self.0[5]
    }
    pub fn bottom_left_corner(&self) -> bool {
        self.0[6]
    }
    pub fn bottom_right_corner(&self) -> bool {
        self.0[7]
    }

    /// Names of the predicates that hold.
    pub fn active(&self) -> Vec<&'static str> {
        SYMBOL_NAMES
            .iter()
            .zip(self.0)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn encode(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// One deterministic move; moves off the grid leave the agent in place.
pub fn transition(obs: Observation, action: Action, cfg: &GridConfig) -> Observation {
    let last = cfg.n - 1;
    match action {
        Action::Up => Observation::new(obs.row.saturating_sub(1), obs.col),
        Action::Down => Observation::new((obs.row + 1).min(last), obs.col),
        Action::Left => Observation::new(obs.row, obs.col.saturating_sub(1)),
        Action::Right => Observation::new(obs.row, (obs.col + 1).min(last)),
    }
}

pub fn symbolize(obs: Observation, cfg: &GridConfig) -> SymbolVector {
    let last = cfg.n - 1;
    let top = obs.row == 0;
    let bottom = obs.row == last;
    let left = obs.col == 0;
    let right = obs.col == last;
    SymbolVector([
        top,
        left,
        right,
        bottom,
        top && left,
        top && right,
        bottom && left,
        bottom && right,
    ])
}

pub fn manhattan_to_goal(obs: Observation, cfg: &GridConfig) -> usize {
    let goal = cfg.goal();
    obs.row.abs_diff(goal.row) + obs.col.abs_diff(goal.col)
}

/// Ground-truth reward: the negative Manhattan distance to the goal.
pub fn gt_reward(obs: Observation, cfg: &GridConfig) -> f64 {
    -(manhattan_to_goal(obs, cfg) as f64)
}

/// Concatenated one-hot row and column, length `2n`.
pub fn encode_observation(obs: Observation, cfg: &GridConfig) -> Vec<f64> {
    let mut v = vec![0.0; 2 * cfg.n];
    v[obs.row] = 1.0;
    v[cfg.n + obs.col] = 1.0;
    v
}

pub fn encode_action(action: Action) -> [f64; 4] {
    let mut v = [0.0; 4];
    v[action.index()] = 1.0;
    v
}

/// Which view of a state the prior models consume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateEncoding {
    /// The 8 boolean symbols as 0/1.
    Symbols,
    /// One-hot row ⧺ one-hot column.
    Observations,
}

impl StateEncoding {
    pub fn dim(self, cfg: &GridConfig) -> usize {
        match self {
            StateEncoding::Symbols => SymbolVector::LEN,
            StateEncoding::Observations => 2 * cfg.n,
        }
    }

    pub fn encode(self, obs: Observation, cfg: &GridConfig) -> Vec<f64> {
        match self {
            StateEncoding::Symbols => symbolize(obs, cfg).encode(),
            StateEncoding::Observations => encode_observation(obs, cfg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid8() -> GridConfig {
        GridConfig::new(8).unwrap()
    }

    #[test]
    fn config_rejects_degenerate_grid() {
        assert_eq!(GridConfig::new(1), Err(GridError::TooSmall(1)));
        let g = GridConfig::new(2).unwrap();
        assert_ne!(g.start(), g.goal());
    }

    #[test]
    fn transition_examples() {
        let g = grid8();
        assert_eq!(transition(Observation::new(0, 0), Action::Up, &g), Observation::new(0, 0));
        assert_eq!(transition(Observation::new(3, 3), Action::Right, &g), Observation::new(3, 4));
        let reached = transition(Observation::new(7, 6), Action::Right, &g);
        assert_eq!(reached, g.goal());
    }

    #[test]
    fn transition_stays_in_bounds() {
        for n in 2..7 {
            let g = GridConfig::new(n).unwrap();
            for cell in g.cells() {
                for a in Action::ALL {
                    let next = transition(cell, a, &g);
                    assert!(g.contains(next));
                    assert!(manhattan_to_goal(next, &g).abs_diff(manhattan_to_goal(cell, &g)) <= 1);
                }
            }
        }
    }

    #[test]
    fn symbolize_examples() {
        let g = grid8();
        assert_eq!(
            symbolize(Observation::new(0, 0), &g).active(),
            vec!["at_top_edge", "at_left_edge", "at_top_left_corner"]
        );
        assert_eq!(symbolize(Observation::new(3, 3), &g), SymbolVector::default());
        assert_eq!(
            symbolize(Observation::new(7, 7), &g).active(),
            vec!["at_right_edge", "at_bottom_edge", "at_bottom_right_corner"]
        );
    }

    #[test]
    fn symbol_invariants_hold_on_every_cell() {
        for n in 2..10 {
            let g = GridConfig::new(n).unwrap();
            for cell in g.cells() {
                let s = symbolize(cell, &g);
                if s.top_left_corner() {
                    assert!(s.top_edge() && s.left_edge());
                }
                if s.top_right_corner() {
                    assert!(s.top_edge() && s.right_edge());
                }
                if s.bottom_left_corner() {
                    assert!(s.bottom_edge() && s.left_edge());
                }
                if s.bottom_right_corner() {
                    assert!(s.bottom_edge() && s.right_edge());
                }
                assert!(s.0[4..].iter().filter(|&&c| c).count() <= 1);
                let interior = cell.row > 0 && cell.row < n - 1 && cell.col > 0 && cell.col < n - 1;
                assert_eq!(interior, s == SymbolVector::default());
            }
        }
    }

    #[test]
    fn gt_reward_examples() {
        let g = grid8();
        assert_eq!(gt_reward(Observation::new(7, 7), &g), 0.0);
        assert_eq!(gt_reward(Observation::new(0, 0), &g), -14.0);
        assert_eq!(gt_reward(Observation::new(3, 4), &g), -7.0);
    }

    #[test]
    fn gt_reward_structure() {
        let g = GridConfig::new(6).unwrap();
        for cell in g.cells() {
            let r = gt_reward(cell, &g);
            assert_eq!(r == 0.0, cell == g.goal());
            assert!(r <= 0.0);
            for a in Action::ALL {
                let next = transition(cell, a, &g);
                if next != cell {
                    assert_eq!((gt_reward(next, &g) - r).abs(), 1.0);
                }
            }
        }
    }

    #[test]
    fn encodings() {
        let g = GridConfig::new(3).unwrap();
        assert_eq!(encode_observation(Observation::new(1, 2), &g), vec![0., 1., 0., 0., 0., 1.]);
        assert_eq!(encode_action(Action::Left), [0., 0., 1., 0.]);
        let json = serde_json::to_string(&symbolize(Observation::new(0, 0), &g)).unwrap();
        assert_eq!(json, "[true,true,false,false,true,false,false,false]");
    }
}
