use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tape, Tensor, Var};

/// Named learnable tensors with gradient accumulators.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    names: Vec<String>,
    values: Vec<Tensor>,
    #[serde(skip)]
    grads: Vec<Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.grads.push(Tensor::zeros(value.shape()));
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn grad(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }

    fn ensure_grads(&mut self) {
        if self.grads.len() != self.values.len() {
            self.grads = self.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
        }
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.variable(v.clone())).collect()
    }

    /// Records every parameter as a constant leaf.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.constant(v.clone())).collect()
    }

    /// Adds the gradients held by `tape` for `vars` into the accumulators.
    pub fn accumulate(&mut self, tape: &Tape, vars: &[Var]) {
        self.ensure_grads();
        for (acc, v) in self.grads.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(*v) {
                acc.add_assign(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.ensure_grads();
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn check_finite(&self) -> Result<(), AutodiffError> {
        for (i, g) in self.grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient {
                    name: self.names[i].clone(),
                    index: i,
                });
            }
        }
        Ok(())
    }
}

/// Uniform Glorot initialisation for a `[fan_in, fan_out]` weight matrix.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

pub trait Optimizer {
    /// Applies the accumulated gradients and zeroes them.
    fn step(&mut self, params: &mut Parameters) -> Result<(), AutodiffError>;
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut Parameters) -> Result<(), AutodiffError> {
        params.ensure_grads();
        params.check_finite()?;
        for (value, grad) in params.values.iter_mut().zip(&params.grads) {
            for (p, g) in value.data_mut().iter_mut().zip(grad.data()) {
                *p -= self.lr * g;
            }
        }
        params.zero_grads();
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut Parameters) -> Result<(), AutodiffError> {
        params.ensure_grads();
        params.check_finite()?;
        if self.m.len() != params.len() {
            self.m = params.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for (i, value) in params.values.iter_mut().enumerate() {
            let g = params.grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for (j, p) in value.data_mut().iter_mut().enumerate() {
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}
