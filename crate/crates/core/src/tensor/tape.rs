use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernels: usize,
        bias: usize,
        geometry: ConvGeometry,
        cols: Vec<f64>,
    },
    Dense {
        input: usize,
        weights: usize,
        bias: usize,
    },
    Relu {
        input: usize,
    },
    MaxPool {
        input: usize,
        argmax: Vec<u32>,
    },
    Reshape {
        input: usize,
    },
    Add {
        lhs: usize,
        rhs: usize,
    },
    Mul {
        lhs: usize,
        rhs: usize,
    },
    Sum {
        input: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// reverse. Node inputs always precede the node, so the tape is
/// topologically sorted by construction.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {var:?} was not recorded on tape {}",
                self.id
            )));
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn needs_grad(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].value.requires_grad())
    }

    /// Records an input. Its `requires_grad` flag decides whether backward
    /// fills in its gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.index(var)?].value)
    }

    pub fn grad(&self, var: Var) -> Result<Option<&[f64]>> {
        Ok(self.nodes[self.index(var)?].value.grad())
    }

    pub fn take_grad(&mut self, var: Var) -> Result<Option<Vec<f64>>> {
        let i = self.index(var)?;
        Ok(self.nodes[i].value.take_grad())
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xi, ki, bi) = (self.index(input)?, self.index(kernels)?, self.index(bias)?);
        let (x, k, b) = (
            &self.nodes[xi].value,
            &self.nodes[ki].value,
            &self.nodes[bi].value,
        );
        let geometry = ConvGeometry::new(x.shape(), k.shape(), b.shape(), stride, padding)?;
        let mut cols = Vec::new();
        let out = ops::conv2d_forward(&geometry, x.data(), k.data(), b.data(), Some(&mut cols));
        let rg = self.needs_grad(&[xi, ki, bi]);
        let value = Tensor::new(geometry.output_shape(), out)?.with_requires_grad(rg);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: xi,
                kernels: ki,
                bias: bi,
                geometry,
                cols,
            },
        ))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.index(input)?, self.index(weights)?, self.index(bias)?);
        let (x, w, b) = (
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
        );
        let (n, din, dout) = ops::dense_dims(x.shape(), w.shape(), b.shape())?;
        let out = ops::dense_forward(n, din, dout, x.data(), w.data(), b.data());
        let rg = self.needs_grad(&[xi, wi, bi]);
        let value = Tensor::new([n, dout], out)?.with_requires_grad(rg);
        Ok(self.push(
            value,
            Op::Dense {
                input: xi,
                weights: wi,
                bias: bi,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let xi = self.index(input)?;
        let x = &self.nodes[xi].value;
        let value = ops::relu(x).with_requires_grad(x.requires_grad());
        Ok(self.push(value, Op::Relu { input: xi }))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let xi = self.index(input)?;
        let x = &self.nodes[xi].value;
        let dims = ops::pool_dims(x.shape())?;
        let (out, argmax) = ops::maxpool_forward(dims, x.data());
        let value = Tensor::new([dims[0], dims[1], dims[2] / 2, dims[3] / 2], out)?
            .with_requires_grad(x.requires_grad());
        Ok(self.push(value, Op::MaxPool { input: xi, argmax }))
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, rest]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let xi = self.index(input)?;
        let x = &self.nodes[xi].value;
        let n = *x
            .shape()
            .first()
            .ok_or_else(|| Error::invalid("flatten on a scalar"))?;
        let rest = if n == 0 { 0 } else { x.numel() / n };
        let value = x.clone().reshape([n, rest])?;
        Ok(self.push(value, Op::Reshape { input: xi }))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.index(lhs)?, self.index(rhs)?);
        self.same_shape("add", a, b)?;
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value =
            Tensor::new(x.shape().to_vec(), data)?.with_requires_grad(self.needs_grad(&[a, b]));
        Ok(self.push(value, Op::Add { lhs: a, rhs: b }))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.index(lhs)?, self.index(rhs)?);
        self.same_shape("mul", a, b)?;
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value =
            Tensor::new(x.shape().to_vec(), data)?.with_requires_grad(self.needs_grad(&[a, b]));
        Ok(self.push(value, Op::Mul { lhs: a, rhs: b }))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let xi = self.index(input)?;
        let x = &self.nodes[xi].value;
        let value = Tensor::scalar(x.data().iter().sum()).with_requires_grad(x.requires_grad());
        Ok(self.push(value, Op::Sum { input: xi }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.index(logits)?;
        let x = &self.nodes[li].value;
        let &[rows, classes] = x.shape() else {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: x.shape().to_vec(),
                right: vec![labels.len()],
            });
        };
        ops::check_labels(rows, classes, labels)?;
        let (loss, probs) = ops::softmax_ce_forward(rows, classes, x.data(), labels);
        let value = Tensor::scalar(loss).with_requires_grad(x.requires_grad());
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every leaf recorded
    /// with `requires_grad` holds d(loss)/d(leaf) in its `grad` field, summed
    /// over all of its uses.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.index(loss)?;
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].value.requires_grad() {
                    self.nodes[i].value.set_grad(g)?;
                }
                continue;
            }
            let nodes = &self.nodes;
            let node = &nodes[i];
            let send = |grads: &mut Vec<Option<Vec<f64>>>, to: usize, delta: Vec<f64>| {
                if !nodes[to].value.requires_grad() {
                    return;
                }
                match &mut grads[to] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    geometry,
                    cols,
                } => {
                    let need_input = nodes[*input].value.requires_grad();
                    let r = ops::conv2d_backward(
                        geometry,
                        &g,
                        nodes[*kernels].value.data(),
                        cols,
                        need_input,
                    );
                    if let Some(dx) = r.input {
                        send(&mut grads, *input, dx);
                    }
                    send(&mut grads, *kernels, r.kernels);
                    send(&mut grads, *bias, r.bias);
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let x = &nodes[*input].value;
                    let (n, din, dout) = (x.shape()[0], x.shape()[1], node.value.shape()[1]);
                    let r = ops::dense_backward(
                        n,
                        din,
                        dout,
                        &g,
                        x.data(),
                        nodes[*weights].value.data(),
                        x.requires_grad(),
                    );
                    if let Some(dx) = r.input {
                        send(&mut grads, *input, dx);
                    }
                    send(&mut grads, *weights, r.weights);
                    send(&mut grads, *bias, r.bias);
                }
                Op::Relu { input } => {
                    let x = nodes[*input].value.data();
                    let dx = g
                        .iter()
                        .zip(x)
                        .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                        .collect();
                    send(&mut grads, *input, dx);
                }
                Op::MaxPool { input, argmax } => {
                    let mut dx = vec![0.0; nodes[*input].value.numel()];
                    for (&a, &d) in argmax.iter().zip(&g) {
                        dx[a as usize] += d;
                    }
                    send(&mut grads, *input, dx);
                }
                Op::Reshape { input } => send(&mut grads, *input, g),
                Op::Add { lhs, rhs } => {
                    send(&mut grads, *lhs, g.clone());
                    send(&mut grads, *rhs, g);
                }
                Op::Mul { lhs, rhs } => {
                    let (a, b) = (nodes[*lhs].value.data(), nodes[*rhs].value.data());
                    let da = g.iter().zip(b).map(|(d, y)| d * y).collect();
                    let db = g.iter().zip(a).map(|(d, x)| d * x).collect();
                    send(&mut grads, *lhs, da);
                    send(&mut grads, *rhs, db);
                }
                Op::Sum { input } => {
                    let n = nodes[*input].value.numel();
                    send(&mut grads, *input, vec![g[0]; n]);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let rows = labels.len();
                    let classes = probs.len() / rows.max(1);
                    let scale = g[0] / rows as f64;
                    let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        dx[r * classes + l] -= scale;
                    }
                    send(&mut grads, *logits, dx);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_fn([2, 3], |i| i as f64).with_requires_grad(true));
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gives_twice_w() {
        let mut tape = Tape::new();
        let w = tape.leaf(
            Tensor::new([3], vec![1.0, 2.0, 3.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0).with_requires_grad(true));
        let _ = b.leaf(Tensor::scalar(1.0));
        assert!(matches!(b.backward(x), Err(Error::Tape(_))));
        assert!(b.sum(x).is_err());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros([2]).with_requires_grad(true));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::full([2], 2.0).with_requires_grad(true));
        let c = tape.leaf(Tensor::full([2], 3.0));
        let p = tape.mul(w, c).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().unwrap(), &[3.0, 3.0]);
        assert!(tape.grad(c).unwrap().is_none());
    }
}
