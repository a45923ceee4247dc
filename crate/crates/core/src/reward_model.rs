//! The learned reward `r(o, a)`, Bradley-Terry preference probabilities and
//! the preference cross-entropy.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{linear, xavier_uniform, Parameters, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gridworld::{encode_action, encode_observation, Action, GridConfig, Observation};
use crate::teacher::{PreferencePair, Step, Trajectory};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// `tanh(x)`, in `[-1, 1]`.
    #[default]
    Standard,
    /// `(tanh(x) - 1) / 2`, in `[-1, 0]`.
    ForcedNegative,
}

impl OutputMode {
    pub fn apply(self, pre_activation: f64) -> f64 {
        match self {
            OutputMode::Standard => pre_activation.tanh(),
            OutputMode::ForcedNegative => (pre_activation.tanh() - 1.0) / 2.0,
        }
    }
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const W_OUT: usize = 4;
const B_OUT: usize = 5;

/// Two-hidden-layer tanh MLP over `[one-hot row ⧺ one-hot col ⧺ one-hot action]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardNet {
    params: Parameters,
    grid: GridConfig,
    hidden: usize,
    mode: OutputMode,
}

impl RewardNet {
    pub fn new(grid: GridConfig, hidden: usize, mode: OutputMode, rng: &mut impl Rng) -> Self {
        let input = Self::input_dim_for(&grid);
        let mut params = Parameters::new();
        params.add("w1", xavier_uniform(input, hidden, rng));
        params.add("b1", Tensor::zeros(&[hidden]));
        params.add("w2", xavier_uniform(hidden, hidden, rng));
        params.add("b2", Tensor::zeros(&[hidden]));
        params.add("w_out", xavier_uniform(hidden, 1, rng));
        params.add("b_out", Tensor::zeros(&[1]));
        Self {
            params,
            grid,
            hidden,
            mode,
        }
    }

    fn input_dim_for(grid: &GridConfig) -> usize {
        2 * grid.n() + Action::COUNT
    }

    pub fn input_dim(&self) -> usize {
        Self::input_dim_for(&self.grid)
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn mode(&self) -> OutputMode {
        self.mode
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    /// Zeroes the output layer so every prediction is the mode's value at 0.
    pub fn zero_output_head(&mut self) {
        for i in [W_OUT, B_OUT] {
            self.params.get_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn encode(&self, obs: Observation, action: Action) -> Vec<f64> {
        let mut v = encode_observation(obs, &self.grid);
        v.extend(encode_action(action));
        v
    }

    pub fn encode_steps(&self, steps: &[Step]) -> Tensor {
        let mut data = Vec::with_capacity(steps.len() * self.input_dim());
        for s in steps {
            data.extend(self.encode(s.obs(), s.action));
        }
        Tensor::matrix(steps.len(), self.input_dim(), data).expect("encoding width")
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind(tape)
    }

    /// Per-row rewards for an encoded batch `[rows, input_dim]`, as a vector.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = linear(tape, x, vars[W1], vars[B1])?;
        let h = tape.tanh(h);
        let h = linear(tape, h, vars[W2], vars[B2])?;
        let h = tape.tanh(h);
        let out = linear(tape, h, vars[W_OUT], vars[B_OUT])?;
        let rows = tape.value(out).shape()[0];
        let out = tape.reshape(out, &[rows])?;
        let t = tape.tanh(out);
        Ok(match self.mode {
            OutputMode::Standard => t,
            OutputMode::ForcedNegative => {
                let shifted = tape.add_scalar(t, -1.0);
                tape.scale(shifted, 0.5)
            }
        })
    }

    /// Per-step rewards of `traj` on `tape`, shape `[len]`.
    pub fn step_rewards_on(&self, tape: &mut Tape, vars: &[Var], traj: &Trajectory) -> Result<Var> {
        let x = tape.constant(self.encode_steps(traj.steps()));
        self.forward(tape, vars, x)
    }

    fn eval_rows(&self, x: Tensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let x = tape.constant(x);
        let r = self.forward(&mut tape, &vars, x).expect("reward forward");
        tape.value(r).data().to_vec()
    }

    pub fn predict_reward(&self, obs: Observation, action: Action) -> f64 {
        let x = Tensor::matrix(1, self.input_dim(), self.encode(obs, action)).expect("encoding width");
        self.eval_rows(x)[0]
    }

    pub fn step_rewards(&self, traj: &Trajectory) -> Vec<f64> {
        self.eval_rows(self.encode_steps(traj.steps()))
    }

    pub fn trajectory_return(&self, traj: &Trajectory) -> f64 {
        self.step_rewards(traj).iter().sum()
    }

    /// `(P[τ0 ≻ τ1], P[τ1 ≻ τ0])`.
    pub fn bt_probability(&self, tau0: &Trajectory, tau1: &Trajectory) -> (f64, f64) {
        bt_from_returns(self.trajectory_return(tau0), self.trajectory_return(tau1))
    }

    /// Rewards for every `(cell, action)`, indexed `[state_index][action]`.
    pub fn reward_table(&self) -> RewardTable {
        let mut data = Vec::with_capacity(self.grid.state_count() * 4 * self.input_dim());
        for cell in self.grid.cells() {
            for a in Action::ALL {
                data.extend(self.encode(cell, a));
            }
        }
        let rows = self.grid.state_count() * 4;
        let flat = self.eval_rows(Tensor::matrix(rows, self.input_dim(), data).expect("table encoding"));
        RewardTable::new(self.grid, flat)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "reward",
            json!({ "grid_n": self.grid.n(), "hidden": self.hidden, "mode": self.mode }),
            &self.params,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            ckpt.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing meta field {k}")))
        };
        let n: usize = serde_json::from_value(field("grid_n")?)?;
        let hidden: usize = serde_json::from_value(field("hidden")?)?;
        let mode: OutputMode = serde_json::from_value(field("mode")?)?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut net = Self::new(GridConfig::new(n)?, hidden, mode, &mut rng);
        ckpt.restore_into("reward", &mut net.params)?;
        Ok(net)
    }
}

/// Stable logistic of the return difference.
pub fn bt_from_returns(r0: f64, r1: f64) -> (f64, f64) {
    let d = r0 - r1;
    let p = if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    };
    (p, 1.0 - p)
}

/// `-[y0 ln P(τ0 ≻ τ1) + y1 ln P(τ1 ≻ τ0)]` for scalar returns on the tape.
pub fn preference_ce(tape: &mut Tape, return0: Var, return1: Var, y: [f64; 2]) -> Result<Var> {
    let r0 = tape.reshape(return0, &[1])?;
    let r1 = tape.reshape(return1, &[1])?;
    let logits = tape.concat(&[r0, r1])?;
    let log_p = tape.log_softmax(logits, 0)?;
    let y = tape.constant(Tensor::vector(y.to_vec()));
    let weighted = tape.mul(log_p, y)?;
    let s = tape.sum(weighted);
    Ok(tape.scale(s, -1.0))
}

/// Preference cross-entropy of `pair` under `net`, differentiable in the
/// parameters bound as `vars`.
pub fn ce_loss(tape: &mut Tape, net: &RewardNet, vars: &[Var], pair: &PreferencePair) -> Result<Var> {
    let r0 = net.step_rewards_on(tape, vars, &pair.tau0)?;
    let r1 = net.step_rewards_on(tape, vars, &pair.tau1)?;
    let ret0 = tape.sum(r0);
    let ret1 = tape.sum(r1);
    preference_ce(tape, ret0, ret1, pair.y)
}

/// Learned rewards over the full state-action space.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTable {
    grid: GridConfig,
    values: Vec<f64>,
}

impl RewardTable {
    /// `values` is indexed `state_index * 4 + action`.
    pub fn new(grid: GridConfig, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.state_count() * 4);
        Self { grid, values }
    }

    /// Table of a state-only reward function.
    pub fn from_fn(grid: GridConfig, f: impl Fn(Observation) -> f64) -> Self {
        let values = grid
            .cells()
            .flat_map(|c| {
                let r = f(c);
                [r; 4]
            })
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn get(&self, obs: Observation, action: Action) -> f64 {
        self.values[self.grid.state_index(obs) * 4 + action.index()]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Best achievable reward in each cell, row-major.
    pub fn cell_max(&self) -> Vec<f64> {
        self.values
            .chunks(4)
            .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff::{central_difference, max_relative_error};
    use crate::teacher::oracle_label;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> GridConfig {
        GridConfig::new(8).unwrap()
    }

    fn walk(rng: &mut ChaCha8Rng, len: usize) -> Trajectory {
        let g = grid();
        let start = g.observation(rng.gen_range(0..g.state_count()));
        let acts: Vec<Action> = (0..len).map(|_| Action::from_index(rng.gen_range(0..4))).collect();
        Trajectory::from_actions(start, &acts, &g).unwrap()
    }

    #[test]
    fn zero_head_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = RewardNet::new(grid(), 64, OutputMode::Standard, &mut rng);
        net.zero_output_head();
        assert_eq!(net.predict_reward(Observation::new(2, 3), Action::Up), 0.0);
        let mut neg = RewardNet::new(grid(), 64, OutputMode::ForcedNegative, &mut rng);
        neg.zero_output_head();
        assert_eq!(neg.predict_reward(Observation::new(2, 3), Action::Up), -0.5);
    }

    #[test]
    fn forced_negative_range_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut count = 0;
        while count < 10_000 {
            let mut net = RewardNet::new(grid(), 16, OutputMode::ForcedNegative, &mut rng);
            // Blow the weights up so that outputs reach saturation.
            let scale = rng.gen_range(0.1..20.0);
            for i in 0..net.params().len() {
                net.params_mut().get_mut(i).data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            for r in net.reward_table().values() {
                assert!((-1.0..=0.0).contains(r), "{r}");
                count += 1;
            }
        }
    }

    #[test]
    fn trajectory_return_sums_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = RewardNet::new(grid(), 64, OutputMode::Standard, &mut rng);
        let t = walk(&mut rng, 5);
        let mut oracle = 0.0;
        for s in t.steps() {
            oracle += net.predict_reward(s.obs(), s.action);
        }
        assert!((net.trajectory_return(&t) - oracle).abs() <= 1e-12);

        let one = t.window(0, 2);
        let first = one.steps()[0];
        let r = net.step_rewards(&one);
        assert_eq!(r[0], net.predict_reward(first.obs(), first.action));
    }

    #[test]
    fn saturated_return() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = RewardNet::new(grid(), 8, OutputMode::Standard, &mut rng);
        net.zero_output_head();
        net.params_mut().get_mut(B_OUT).data_mut()[0] = -100.0;
        let t = walk(&mut rng, 8);
        assert_eq!(net.trajectory_return(&t), -8.0);
    }

    #[test]
    fn bt_examples() {
        assert_eq!(bt_from_returns(1.5, 1.5), (0.5, 0.5));
        let (p, q) = bt_from_returns(3f64.ln(), 0.0);
        assert!((p - 0.75).abs() < 1e-15 && (q - 0.25).abs() < 1e-15);
        let (p, _) = bt_from_returns(50.0, 0.0);
        assert!(p.is_finite() && (1.0 - p) < 1e-20);
        let (p, _) = bt_from_returns(-800.0, 0.0);
        assert!(p.is_finite() && p >= 0.0);
    }

    #[test]
    fn ce_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.3));
        let b = tape.constant(Tensor::scalar(0.3));
        let l = preference_ce(&mut tape, a, b, [1.0, 0.0]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let l = preference_ce(&mut tape, a, b, [0.5, 0.5]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let c = tape.constant(Tensor::scalar(40.0));
        let l = preference_ce(&mut tape, c, a, [1.0, 0.0]).unwrap();
        assert!(tape.value(l).item() < 1e-15);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = RewardNet::new(grid(), 16, OutputMode::Standard, &mut rng);
        let g = grid();
        let pair = oracle_label(&walk(&mut rng, 6), &walk(&mut rng, 6), &g).unwrap();
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape);
        let loss = ce_loss(&mut tape, &net, &vars, &pair).unwrap();
        tape.backward(loss).unwrap();
        for i in 0..net.params().len() {
            let numeric = central_difference(net.params().get(i), 1e-5, |p| {
                let mut probe = net.clone();
                *probe.params_mut().get_mut(i) = p.clone();
                let mut t = Tape::new();
                let v = probe.params().bind_frozen(&mut t);
                let l = ce_loss(&mut t, &probe, &v, &pair).unwrap();
                t.value(l).item()
            });
            let err = max_relative_error(tape.grad(vars[i]).unwrap().data(), &numeric);
            assert!(err <= 1e-4, "param {i}: {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = RewardNet::new(grid(), 8, OutputMode::ForcedNegative, &mut rng);
        let json = net.checkpoint().to_json().unwrap();
        let back = RewardNet::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.mode(), OutputMode::ForcedNegative);
        assert_eq!(back.checkpoint().to_json().unwrap(), json);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn bt_is_antisymmetric(r0 in -50.0..50.0f64, r1 in -50.0..50.0f64) {
                let (p, _) = bt_from_returns(r0, r1);
                let (q, _) = bt_from_returns(r1, r0);
                prop_assert!((p + q - 1.0).abs() <= 1e-9);
            }

            #[test]
            fn bt_ignores_common_shift(rs in proptest::collection::vec(-1.0..1.0f64, 8), c in -1.0..1.0f64) {
                let (a, b) = rs.split_at(4);
                let r0: f64 = a.iter().sum();
                let r1: f64 = b.iter().sum();
                let s0: f64 = a.iter().map(|x| x + c).sum();
                let s1: f64 = b.iter().map(|x| x + c).sum();
                prop_assert!((bt_from_returns(r0, r1).0 - bt_from_returns(s0, s1).0).abs() <= 1e-9);
            }

            #[test]
            fn ce_is_nonnegative(r0 in -8.0..8.0f64, r1 in -8.0..8.0f64, k in 0..3usize) {
                let y = [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]][k];
                let mut tape = Tape::new();
                let a = tape.constant(Tensor::scalar(r0));
                let b = tape.constant(Tensor::scalar(r1));
                let l = preference_ce(&mut tape, a, b, y).unwrap();
                prop_assert!(tape.value(l).item() >= 0.0);
            }

            #[test]
            fn reward_within_mode_range(seed in 0u64..u64::MAX, row in 0..8usize, col in 0..8usize, a in 0..4usize, scale in 0.1..10.0f64) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for mode in [OutputMode::Standard, OutputMode::ForcedNegative] {
                    let mut net = RewardNet::new(GridConfig::new(8).unwrap(), 8, mode, &mut rng);
                    for i in 0..net.params().len() {
                        net.params_mut().get_mut(i).data_mut().iter_mut().for_each(|v| *v *= scale);
                    }
                    let r = net.predict_reward(Observation::new(row, col), Action::from_index(a));
                    let hi = if mode == OutputMode::Standard { 1.0 } else { 0.0 };
                    prop_assert!((-1.0..=hi).contains(&r));
                }
            }
        }
    }
}
