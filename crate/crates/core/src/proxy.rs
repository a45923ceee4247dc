//! Proxy-labelling prior.
//!
//! A self-attention classifier sees both trajectories of a pair and predicts
//! which one the teacher preferred. Vanilla gradients of the predicted
//! class's logit with respect to each step's input give signed per-step
//! importances; the dis-preferred trajectory's importances are forced
//! non-positive, and the reward's softmax over both trajectories is pulled
//! toward the softmax of those importances.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{linear, softmax, xavier_uniform, Adam, Optimizer, Parameters, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gridworld::{encode_action, GridConfig, StateEncoding};
use crate::teacher::{PreferencePair, Trajectory};

const W_ENC: usize = 0;
const B_ENC: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const W_C1: usize = 5;
const B_C1: usize = 6;
const W_C2: usize = 7;
const B_C2: usize = 8;

/// Pairwise preference classifier. The step encoder and attention block are
/// shared by both trajectories; each trajectory is summarised by the mean of
/// its attention outputs, and the two summaries are concatenated into a
/// small fully connected head producing two logits. There is no positional
/// signal, so the classifier treats a trajectory as a multiset of steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyLabeller {
    params: Parameters,
    grid: GridConfig,
    encoding: StateEncoding,
    dim: usize,
}

#[derive(Clone, Debug)]
pub struct ProxyTrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Per-step vanilla gradients for both trajectories of a pair, before the
/// dis-preferred sign transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedStepImportance {
    pub g0: Vec<f64>,
    pub g1: Vec<f64>,
    /// Index of the trajectory the classifier predicts as preferred.
    pub predicted: usize,
}

impl SignedStepImportance {
    /// `g` of the predicted-preferred trajectory followed by the transformed
    /// `ĝ` of the other one.
    pub fn ordered_target(&self) -> Result<Vec<f64>> {
        let (pref, dispref) = if self.predicted == 0 {
            (&self.g0, &self.g1)
        } else {
            (&self.g1, &self.g0)
        };
        let mut out = pref.clone();
        out.extend(transform_dispreferred(dispref)?);
        Ok(out)
    }
}

impl ProxyLabeller {
    pub fn new(grid: GridConfig, encoding: StateEncoding, dim: usize, rng: &mut impl Rng) -> Self {
        let input = encoding.dim(&grid) + 4;
        let mut params = Parameters::new();
        params.add("w_enc", xavier_uniform(input, dim, rng));
        params.add("b_enc", Tensor::zeros(&[dim]));
        params.add("wq", xavier_uniform(dim, dim, rng));
        params.add("wk", xavier_uniform(dim, dim, rng));
        params.add("wv", xavier_uniform(dim, dim, rng));
        params.add("w_c1", xavier_uniform(2 * dim, dim, rng));
        params.add("b_c1", Tensor::zeros(&[dim]));
        params.add("w_c2", xavier_uniform(dim, 2, rng));
        params.add("b_c2", Tensor::zeros(&[2]));
        Self {
            params,
            grid,
            encoding,
            dim,
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

    /// Zeroes the last classifier layer so both logits are constant.
    pub fn zero_classifier_output(&mut self) {
        for i in [W_C2, B_C2] {
            self.params.get_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// `[len, state_dim + 4]` step inputs `I_{s,a}`.
    pub fn encode(&self, traj: &Trajectory) -> Tensor {
        let rows: Vec<Vec<f64>> = traj
            .steps()
            .iter()
            .map(|s| {
                let mut v = self.encoding.encode(s.obs(), &self.grid);
                v.extend(encode_action(s.action));
                v
            })
            .collect();
        Tensor::from_rows(&rows).expect("step encoding width")
    }

    fn embed(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = linear(tape, x, vars[W_ENC], vars[B_ENC])?;
        let h = tape.tanh(h);
        let q = tape.matmul(h, vars[WQ])?;
        let k = tape.matmul(h, vars[WK])?;
        let v = tape.matmul(h, vars[WV])?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = tape.softmax(scores, 1)?;
        let z = tape.matmul(attn, v)?;
        let pooled = tape.mean_rows(z)?;
        Ok(tape.reshape(pooled, &[self.dim])?)
    }

    /// Two logits `[2]` for the encoded pair `(x0, x1)`.
    pub fn logits(&self, tape: &mut Tape, vars: &[Var], x0: Var, x1: Var) -> Result<Var> {
        let e0 = self.embed(tape, vars, x0)?;
        let e1 = self.embed(tape, vars, x1)?;
        let joint = tape.concat(&[e0, e1])?;
        let joint = tape.reshape(joint, &[1, 2 * self.dim])?;
        let h = linear(tape, joint, vars[W_C1], vars[B_C1])?;
        let h = tape.tanh(h);
        let out = linear(tape, h, vars[W_C2], vars[B_C2])?;
        Ok(tape.reshape(out, &[2])?)
    }

    /// Logits for a pair without recording gradients.
    pub fn predict_logits(&self, tau0: &Trajectory, tau1: &Trajectory) -> Result<[f64; 2]> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let x0 = tape.constant(self.encode(tau0));
        let x1 = tape.constant(self.encode(tau1));
        let l = self.logits(&mut tape, &vars, x0, x1)?;
        let d = tape.value(l).data();
        Ok([d[0], d[1]])
    }

    pub fn predict(&self, tau0: &Trajectory, tau1: &Trajectory) -> Result<usize> {
        let l = self.predict_logits(tau0, tau1)?;
        Ok(argmax2(l))
    }

    /// Fraction of non-tie pairs whose preferred trajectory is predicted.
    pub fn accuracy(&self, pairs: &[PreferencePair]) -> Result<f64> {
        let labelled: Vec<_> = pairs.iter().filter_map(|p| p.preferred().map(|y| (p, y))).collect();
        if labelled.is_empty() {
            return Err(Error::NoTrainablePairs);
        }
        let mut hits = 0;
        for (p, y) in &labelled {
            if self.predict(&p.tau0, &p.tau1)? == *y {
                hits += 1;
            }
        }
        Ok(hits as f64 / labelled.len() as f64)
    }

    /// Cross-entropy training on the non-tie pairs. Returns the training
    /// accuracy after the last epoch.
    pub fn train(&mut self, pairs: &[PreferencePair], options: &ProxyTrainOptions, rng: &mut impl Rng) -> Result<f64> {
        let labelled: Vec<(Tensor, Tensor, usize)> = pairs
            .iter()
            .filter_map(|p| p.preferred().map(|y| (self.encode(&p.tau0), self.encode(&p.tau1), y)))
            .collect();
        if labelled.is_empty() {
            return Err(Error::NoTrainablePairs);
        }
        let mut adam = Adam::with_lr(options.lr);
        let mut order: Vec<usize> = (0..labelled.len()).collect();
        for _ in 0..options.epochs {
            order.shuffle(rng);
            for batch in order.chunks(options.batch_size.max(1)) {
                let mut tape = Tape::new();
                let vars = self.params.bind(&mut tape);
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    let (x0, x1, y) = &labelled[i];
                    let x0 = tape.constant(x0.clone());
                    let x1 = tape.constant(x1.clone());
                    let logits = self.logits(&mut tape, &vars, x0, x1)?;
                    let logp = tape.log_softmax(logits, 0)?;
                    let picked = tape.slice_rows(logp, *y, *y + 1)?;
                    losses.push(tape.scale(picked, -1.0));
                }
                let all = tape.concat(&losses)?;
                let loss = tape.mean(all);
                tape.backward(loss)?;
                self.params.accumulate(&tape, &vars);
                adam.step(&mut self.params)?;
            }
        }
        self.accuracy(pairs)
    }

    /// Vanilla gradient of the predicted class's logit with respect to every
    /// step input, summed over the input components of each step.
    pub fn vanilla_grad(&self, tau0: &Trajectory, tau1: &Trajectory) -> Result<SignedStepImportance> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let x0 = tape.variable(self.encode(tau0));
        let x1 = tape.variable(self.encode(tau1));
        let logits = self.logits(&mut tape, &vars, x0, x1)?;
        let l = tape.value(logits).data();
        let predicted = argmax2([l[0], l[1]]);
        let chosen = tape.slice_rows(logits, predicted, predicted + 1)?;
        let chosen = tape.sum(chosen);
        tape.backward(chosen)?;
        let per_step = |g: &Tensor| -> Vec<f64> {
            let (rows, _) = g.dims2().expect("step input matrix");
            (0..rows).map(|r| g.row(r).iter().sum()).collect()
        };
        Ok(SignedStepImportance {
            g0: per_step(tape.grad(x0).expect("input gradient")),
            g1: per_step(tape.grad(x1).expect("input gradient")),
            predicted,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "proxy",
            json!({ "grid_n": self.grid.n(), "encoding": self.encoding, "dim": self.dim }),
            &self.params,
        )
    }
}

fn argmax2(l: [f64; 2]) -> usize {
    if l[1] > l[0] {
        1
    } else {
        0
    }
}

/// Forces the dis-preferred trajectory's importances non-positive: positive
/// entries become `min(g) - g_k`, the rest are kept.
pub fn transform_dispreferred(g: &[f64]) -> Result<Vec<f64>> {
    if g.is_empty() {
        return Err(Error::Degenerate("empty importance vector".into()));
    }
    let min = g.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(g.iter().map(|&x| if x > 0.0 { min - x } else { x }).collect())
}

/// `L_p = KL(softmax(r_pref ⧺ r_dispref) ∥ softmax(g_pref ⧺ ĝ_dispref))`.
/// The importances enter as constants.
pub fn proxy_prior_loss(
    tape: &mut Tape,
    rewards0: Var,
    rewards1: Var,
    importance: &SignedStepImportance,
) -> Result<Var> {
    let flat = |tape: &mut Tape, v: Var| -> Result<Var> {
        let n = tape.value(v).len();
        Ok(tape.reshape(v, &[n])?)
    };
    let r0 = flat(tape, rewards0)?;
    let r1 = flat(tape, rewards1)?;
    let ordered = if importance.predicted == 0 { [r0, r1] } else { [r1, r0] };
    let joint = tape.concat(&ordered)?;
    let p = tape.softmax(joint, 0)?;
    let target = softmax(&importance.ordered_target()?);
    if target.len() != tape.value(p).len() {
        return Err(Error::Degenerate(format!(
            "{} importances for {} rewards",
            target.len(),
            tape.value(p).len()
        )));
    }
    let q = tape.constant(Tensor::vector(target));
    Ok(tape.kl_divergence(p, q)?)
}
