use serde_json::json;

use super::tensor::{lanes, matmul_raw};
use super::{AutodiffError, Tensor};

/// Floor applied to the second argument of [`Tape::kl_divergence`].
pub const KL_FLOOR: f64 = 1e-8;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `[r, c] + [c]` or `[r, c] + [1, c]`, the bias broadcast used by linear layers.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    /// Input and first row of the slice.
    SliceRows(Var, usize),
    Kl(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::SliceRows(..) => "slice_rows",
            Op::Kl(..) => "kl_divergence",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Kl(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SliceRows(a, _) => vec![*a],
            Op::Concat(vs) => vs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list of recorded operations. Nodes are appended in evaluation
/// order, so every operation's inputs precede it and [`Tape::backward`]
/// simply walks the list in reverse.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a new constant leaf; no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (ta.dims2(), tb.dims2()) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(mismatch("matmul", ta, tb)),
        };
        debug_assert_eq!(k, k2);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias row to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (r, c) = ta.dims2().ok_or_else(|| mismatch("add_row", ta, tb))?;
        if tb.len() != c {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for i in 0..r {
            for (o, &bv) in data[i * c..(i + 1) * c].iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        self.push(value, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let value = softmax_values(t, axis)?;
        Ok(self.push(value, Op::Softmax(a, axis)))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let plan = lanes(t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for &s in &plan.starts {
            let idx = |i: usize| s + i * plan.stride;
            let max = (0..plan.len)
                .map(|i| src[idx(i)])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..plan.len).map(|i| (src[idx(i)] - max).exp()).sum::<f64>().ln();
            for i in 0..plan.len {
                out[idx(i)] = src[idx(i)] - lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax(a, axis)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Column means of a matrix, `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let (r, c) = t.dims2().ok_or(AutodiffError::InvalidAxis {
            axis: 0,
            shape: t.shape().to_vec(),
        })?;
        if r == 0 {
            return Err(AutodiffError::EmptyAxis);
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let value = Tensor::new(vec![1, c], out)?;
        Ok(self.push(value, Op::MeanRows(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let value = t.clone().with_shape(shape.to_vec());
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Concatenates along the leading axis. Trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::Invalid("concat of zero tensors".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.shape()[1..] != tail[..] {
                return Err(mismatch("concat", self.value(*first), t));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Rows `start..end` of a matrix (or elements of a vector).
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let lead = t.shape()[0];
        if start >= end || end > lead {
            return Err(AutodiffError::Invalid(format!(
                "row slice {start}..{end} out of range for shape {:?}",
                t.shape()
            )));
        }
        let width: usize = t.shape()[1..].iter().product();
        let data = t.data()[start * width..end * width].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SliceRows(a, start)))
    }

    /// `KL(p || q)` between two distributions of equal length. `q` is floored
    /// at [`KL_FLOOR`] and renormalised before the logarithm.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var, AutodiffError> {
        let (tp, tq) = (self.value(p), self.value(q));
        if tp.len() != tq.len() || tp.is_empty() {
            return Err(mismatch("kl_divergence", tp, tq));
        }
        let value = Tensor::scalar(kl_value(tp.data(), tq.data()));
        Ok(self.push(value, Op::Kl(p, q)))
    }

    /// Reverse pass from a scalar `loss`. Afterwards every node that requires
    /// a gradient holds one, zero when it does not influence `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            let node = &self.nodes[i];
            for (parent, contribution) in self.local_grads(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if node.requires_grad && slot.is_none() {
                *slot = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>, AutodiffError> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        let grads = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2().expect("matmul operand");
                let n = tb.shape()[1];
                let bt = tb.transpose()?;
                let at = ta.transpose()?;
                let da = Tensor::new(vec![m, k], matmul_raw(g.data(), bt.data(), m, n, k))?;
                let db = Tensor::new(vec![k, n], matmul_raw(at.data(), g.data(), k, m, n))?;
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let da = zip(g, val(*b), |x, y| x * y);
                let db = zip(g, val(*a), |x, y| x * y);
                vec![(*a, da), (*b, db)]
            }
            Op::AddRow(a, bias) => {
                let tb = val(*bias);
                let (r, c) = g.dims2().expect("add_row output");
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for (d, x) in db.iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                vec![(*a, g.clone()), (*bias, Tensor::new(tb.shape().to_vec(), db)?)]
            }
            Op::Scale(a, k) => vec![(*a, g.map(|x| x * k))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Tanh(a) => vec![(*a, zip(g, out, |gx, y| gx * (1.0 - y * y)))],
            Op::Exp(a) => vec![(*a, zip(g, out, |gx, y| gx * y))],
            Op::Softmax(a, axis) => {
                let plan = lanes(out.shape(), *axis)?;
                let (y, gy) = (out.data(), g.data());
                let mut dx = vec![0.0; y.len()];
                for &s in &plan.starts {
                    let idx = |i: usize| s + i * plan.stride;
                    let dot: f64 = (0..plan.len).map(|i| gy[idx(i)] * y[idx(i)]).sum();
                    for i in 0..plan.len {
                        dx[idx(i)] = y[idx(i)] * (gy[idx(i)] - dot);
                    }
                }
                vec![(*a, Tensor::new(out.shape().to_vec(), dx)?)]
            }
            Op::LogSoftmax(a, axis) => {
                let plan = lanes(out.shape(), *axis)?;
                let (y, gy) = (out.data(), g.data());
                let mut dx = vec![0.0; y.len()];
                for &s in &plan.starts {
                    let idx = |i: usize| s + i * plan.stride;
                    let total: f64 = (0..plan.len).map(|i| gy[idx(i)]).sum();
                    for i in 0..plan.len {
                        dx[idx(i)] = gy[idx(i)] - y[idx(i)].exp() * total;
                    }
                }
                vec![(*a, Tensor::new(out.shape().to_vec(), dx)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let t = val(*a);
                vec![(*a, Tensor::full(t.shape(), g.item() / t.len() as f64))]
            }
            Op::MeanRows(a) => {
                let t = val(*a);
                let (r, c) = t.dims2().expect("mean_rows operand");
                let mut d = Vec::with_capacity(r * c);
                for _ in 0..r {
                    d.extend(g.data().iter().map(|x| x / r as f64));
                }
                vec![(*a, Tensor::new(vec![r, c], d)?)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Reshape(a) => vec![(*a, g.clone().with_shape(val(*a).shape().to_vec()))],
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let t = val(*p);
                    let piece = g.data()[offset..offset + t.len()].to_vec();
                    offset += t.len();
                    res.push((*p, Tensor::new(t.shape().to_vec(), piece)?));
                }
                res
            }
            Op::SliceRows(a, start) => {
                let t = val(*a);
                let width: usize = t.shape()[1..].iter().product();
                let mut d = vec![0.0; t.len()];
                d[start * width..start * width + g.len()].copy_from_slice(g.data());
                vec![(*a, Tensor::new(t.shape().to_vec(), d)?)]
            }
            Op::Kl(p, q) => {
                let (tp, tq) = (val(*p), val(*q));
                let (dp, dq) = kl_grads(tp.data(), tq.data(), g.item());
                vec![
                    (*p, Tensor::new(tp.shape().to_vec(), dp)?),
                    (*q, Tensor::new(tq.shape().to_vec(), dq)?),
                ]
            }
        };
        Ok(grads)
    }

    /// JSON dump of the recorded operations, for debugging.
    pub fn to_json(&self) -> serde_json::Value {
        let nodes: Vec<_> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                json!({
                    "id": i,
                    "op": n.op.name(),
                    "parents": n.op.parents().iter().map(|p| p.0).collect::<Vec<_>>(),
                    "shape": n.value.shape(),
                    "requires_grad": n.requires_grad,
                })
            })
            .collect();
        json!({ "nodes": nodes })
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip of equal shapes")
}

pub(crate) fn softmax_values(t: &Tensor, axis: usize) -> Result<Tensor, AutodiffError> {
    let plan = lanes(t.shape(), axis)?;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for &s in &plan.starts {
        let idx = |i: usize| s + i * plan.stride;
        let max = (0..plan.len)
            .map(|i| src[idx(i)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for i in 0..plan.len {
            let e = (src[idx(i)] - max).exp();
            out[idx(i)] = e;
            total += e;
        }
        for i in 0..plan.len {
            out[idx(i)] /= total;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn kl_value(p: &[f64], q: &[f64]) -> f64 {
    let floored: Vec<f64> = q.iter().map(|&x| x.max(KL_FLOOR)).collect();
    let total: f64 = floored.iter().sum();
    p.iter()
        .zip(&floored)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &ci)| pi * (pi / (ci / total)).ln())
        .sum()
}

fn kl_grads(p: &[f64], q: &[f64], upstream: f64) -> (Vec<f64>, Vec<f64>) {
    let floored: Vec<f64> = q.iter().map(|&x| x.max(KL_FLOOR)).collect();
    let total: f64 = floored.iter().sum();
    let p_mass: f64 = p.iter().sum();
    let dp = p
        .iter()
        .zip(&floored)
        .map(|(&pi, &ci)| upstream * ((pi.max(f64::MIN_POSITIVE) / (ci / total)).ln() + 1.0))
        .collect();
    let dq = p
        .iter()
        .zip(q)
        .zip(&floored)
        .map(|((&pi, &qi), &ci)| {
            if qi >= KL_FLOOR {
                upstream * (-pi / ci + p_mass / total)
            } else {
                0.0
            }
        })
        .collect();
    (dp, dq)
}
