//! Reconstruction prior.
//!
//! A one-layer, one-head self-attention model predicts the encoding of a
//! window's final state from the `k = |τ| - 1` states before it. The
//! attention row of the final input position (the row feeding the prediction
//! head) is read off as a distribution over those `k` states, and the reward
//! is pulled toward it with `KL(w ∥ softmax(r))`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{linear, xavier_uniform, Adam, Optimizer, Parameters, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gridworld::{GridConfig, StateEncoding};
use crate::teacher::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Simplex,
    Signed,
}

/// Per-step prior weights over a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorWeights {
    pub weights: Vec<f64>,
    pub kind: PriorKind,
}

impl PriorWeights {
    pub fn simplex(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Degenerate(format!("not a probability vector: {weights:?}")));
        }
        Ok(Self {
            weights,
            kind: PriorKind::Simplex,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

const W_IN: usize = 0;
const B_IN: usize = 1;
const POS: usize = 2;
const WQ: usize = 3;
const WK: usize = 4;
const WV: usize = 5;
const W_H: usize = 6;
const B_H: usize = 7;
const W_OUT: usize = 8;
const B_OUT: usize = 9;

/// Training sample: `k` encoded input states and the target encoding.
#[derive(Clone, Debug)]
pub struct ReconstructionSample {
    pub inputs: Tensor,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionModel {
    params: Parameters,
    grid: GridConfig,
    encoding: StateEncoding,
    dim: usize,
    max_len: usize,
}

/// Output of one forward pass.
pub struct ReconstructionPass {
    /// Full `[k, k]` attention matrix.
    pub attention: Var,
    /// Attention of the final input position over all `k` inputs, `[k]`.
    pub final_row: Var,
    /// Predicted encoding of the next state, `[1, state_dim]`.
    pub prediction: Var,
}

impl ReconstructionModel {
    /// `max_len` bounds the window length (inputs plus target) the learned
    /// positional table covers.
    pub fn new(grid: GridConfig, encoding: StateEncoding, dim: usize, max_len: usize, rng: &mut impl Rng) -> Self {
        let input = encoding.dim(&grid);
        let positions = max_len.saturating_sub(1).max(1);
        let mut params = Parameters::new();
        params.add("w_in", xavier_uniform(input, dim, rng));
        params.add("b_in", Tensor::zeros(&[dim]));
        params.add("pos", xavier_uniform(positions, dim, rng));
        params.add("wq", xavier_uniform(dim, dim, rng));
        params.add("wk", xavier_uniform(dim, dim, rng));
        params.add("wv", xavier_uniform(dim, dim, rng));
        params.add("w_h", xavier_uniform(dim, dim, rng));
        params.add("b_h", Tensor::zeros(&[dim]));
        params.add("w_out", xavier_uniform(dim, input, rng));
        params.add("b_out", Tensor::zeros(&[input]));
        Self {
            params,
            grid,
            encoding,
            dim,
            max_len,
        }
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn encoding(&self) -> StateEncoding {
        self.encoding
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind(tape)
    }

    /// Zeroes the query and key projections, which makes attention uniform.
    pub fn zero_query_key(&mut self) {
        for i in [WQ, WK] {
            self.params.get_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Splits `traj` into the encoded first `k` states and the final state.
    pub fn sample(&self, traj: &Trajectory) -> Result<ReconstructionSample> {
        if traj.len() < 2 {
            return Err(Error::Degenerate(format!("trajectory of length {}", traj.len())));
        }
        if traj.len() > self.max_len {
            return Err(Error::Degenerate(format!(
                "trajectory of length {} exceeds the model's window of {}",
                traj.len(),
                self.max_len
            )));
        }
        let obs: Vec<_> = traj.observations().collect();
        let (history, last) = obs.split_at(obs.len() - 1);
        let rows: Vec<Vec<f64>> = history.iter().map(|o| self.encoding.encode(*o, &self.grid)).collect();
        Ok(ReconstructionSample {
            inputs: Tensor::from_rows(&rows)?,
            target: self.encoding.encode(last[0], &self.grid),
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], inputs: &Tensor) -> Result<ReconstructionPass> {
        let k = inputs.shape()[0];
        let x = tape.constant(inputs.clone());
        let e = linear(tape, x, vars[W_IN], vars[B_IN])?;
        let pos = tape.slice_rows(vars[POS], 0, k)?;
        let e = tape.add(e, pos)?;
        let q = tape.matmul(e, vars[WQ])?;
        let key = tape.matmul(e, vars[WK])?;
        let v = tape.matmul(e, vars[WV])?;
        let kt = tape.transpose(key)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attention = tape.softmax(scores, 1)?;
        let ctx = tape.matmul(attention, v)?;
        let last = tape.slice_rows(ctx, k - 1, k)?;
        let h = linear(tape, last, vars[W_H], vars[B_H])?;
        let h = tape.tanh(h);
        let prediction = linear(tape, h, vars[W_OUT], vars[B_OUT])?;
        let row = tape.slice_rows(attention, k - 1, k)?;
        let final_row = tape.reshape(row, &[k])?;
        Ok(ReconstructionPass {
            attention,
            final_row,
            prediction,
        })
    }

    fn sample_loss(&self, tape: &mut Tape, vars: &[Var], s: &ReconstructionSample) -> Result<Var> {
        let pass = self.forward(tape, vars, &s.inputs)?;
        let target = tape.constant(Tensor::matrix(1, s.target.len(), s.target.clone())?);
        let diff = tape.sub(pass.prediction, target)?;
        let sq = tape.mul(diff, diff)?;
        Ok(tape.mean(sq))
    }

    /// Mean squared reconstruction error over `samples`.
    pub fn mse(&self, samples: &[ReconstructionSample]) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            let mut tape = Tape::new();
            let vars = self.params.bind_frozen(&mut tape);
            let l = self.sample_loss(&mut tape, &vars, s)?;
            total += tape.value(l).item();
        }
        Ok(total / samples.len().max(1) as f64)
    }

    /// Minibatch Adam on the reconstruction MSE. Trajectories shorter than 2
    /// steps are skipped. Returns the mean training loss of every epoch.
    pub fn train(
        &mut self,
        trajectories: &[Trajectory],
        options: &TrainOptions,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        let mut samples = Vec::with_capacity(trajectories.len());
        for t in trajectories {
            if t.len() < 2 {
                log::warn!("skipping trajectory of length {} in reconstruction training", t.len());
                continue;
            }
            samples.push(self.sample(t)?);
        }
        self.train_samples(&samples, options, rng)
    }

    pub fn train_samples(
        &mut self,
        samples: &[ReconstructionSample],
        options: &TrainOptions,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let mut adam = Adam::with_lr(options.lr);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut history = Vec::with_capacity(options.epochs);
        for _ in 0..options.epochs {
            order.shuffle(rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(options.batch_size.max(1)) {
                let mut tape = Tape::new();
                let vars = self.params.bind(&mut tape);
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    let l = self.sample_loss(&mut tape, &vars, &samples[i])?;
                    losses.push(tape.reshape(l, &[1])?);
                }
                let all = tape.concat(&losses)?;
                let loss = tape.mean(all);
                epoch_loss += tape.value(loss).item() * batch.len() as f64;
                tape.backward(loss)?;
                self.params.accumulate(&tape, &vars);
                adam.step(&mut self.params)?;
            }
            history.push(epoch_loss / samples.len() as f64);
        }
        Ok(history)
    }

    /// Reconstruction prior `w` for `traj`: the final-position attention over
    /// its first `|τ| - 1` states.
    pub fn attention_weights(&self, traj: &Trajectory) -> Result<PriorWeights> {
        let s = self.sample(traj)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let pass = self.forward(&mut tape, &vars, &s.inputs)?;
        PriorWeights::simplex(tape.value(pass.final_row).data().to_vec())
    }

    /// Full attention matrix for `traj`, row `i` being the query at input `i`.
    pub fn attention_matrix(&self, traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
        let s = self.sample(traj)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let pass = self.forward(&mut tape, &vars, &s.inputs)?;
        let a = tape.value(pass.attention);
        let k = a.shape()[0];
        Ok((0..k).map(|i| a.row(i).to_vec()).collect())
    }

    /// Prior for `traj` computed on `tape` from the bound `vars`, detached so
    /// that no gradient reaches this model through the reward loss.
    pub fn prior_on_tape(&self, tape: &mut Tape, vars: &[Var], traj: &Trajectory) -> Result<Var> {
        let s = self.sample(traj)?;
        let pass = self.forward(tape, vars, &s.inputs)?;
        Ok(tape.detach(pass.final_row))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "reconstruction",
            json!({
                "grid_n": self.grid.n(),
                "encoding": self.encoding,
                "dim": self.dim,
                "max_len": self.max_len,
            }),
            &self.params,
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Attention matrix as CSV, one row per query position, 6 decimals.
pub fn attention_csv(matrix: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in matrix {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// `L_r = KL(w ∥ softmax(r))` where `prior` holds `w` (no gradient) and
/// `step_rewards` the rewards of the same `k` steps.
pub fn recon_prior_loss(tape: &mut Tape, prior: Var, step_rewards: Var) -> Result<Var> {
    let n = tape.value(step_rewards).len();
    let r = tape.reshape(step_rewards, &[n])?;
    let q = tape.softmax(r, 0)?;
    let p = if tape.requires_grad(prior) {
        tape.detach(prior)
    } else {
        prior
    };
    Ok(tape.kl_divergence(p, q)?)
}
