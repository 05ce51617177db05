//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`] holding the
//! forward value. [`Tape::backward`] walks the nodes once in reverse order and
//! accumulates gradients into the leaves created with [`Tape::leaf`].
//! Calling it twice without [`Tape::zero_grad`] accumulates twice.

use std::cell::{Ref, RefCell};

use crate::entropy;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Conv2d { input: usize, weight: usize, bias: usize, stride: usize, pad: usize },
    ConvTranspose2d { input: usize, weight: usize, bias: usize, stride: usize, pad: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    LeakyRelu(usize, f64),
    Clamp(usize, f64, f64),
    MeanSquareDiff(usize, usize),
    Sum(usize),
    GlobalAvgPool(usize),
    /// Input and the flat index of each plane's first maximum.
    GlobalMaxPool(usize, Vec<usize>),
    Linear { input: usize, weight: usize, bias: usize },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize> },
    Bits { latent: usize, loc: usize, log_scale: usize, floor: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A trainable input: gradients are accumulated for it on backward.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.borrow_mut().push(None);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push_op(&self, op: Op, value: Tensor, inputs: &[usize]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(op, value, requires_grad)
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Accumulated gradient of a leaf, `None` if nothing reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads.borrow()[var.id].clone()
    }

    pub fn zero_grad(&self) {
        for g in self.grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }

    /// Propagates d`loss` back to every leaf reachable from it.
    ///
    /// Returns the number of operations visited.
    pub fn backward(&self, loss: Var<'_>) -> Result<usize> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut adjoint: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        adjoint[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut grads = self.grads.borrow_mut();
        let mut visited = 0;
        for id in (0..=loss.id).rev() {
            let Some(g) = adjoint[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            visited += 1;
            if let Op::Leaf = node.op {
                match &mut grads[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, grad) in local_grads(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut adjoint[input] {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
            }
        }
        Ok(visited)
    }
}

fn local_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => Vec::new(),
        &Op::Conv2d { input, weight, bias, stride, pad } => {
            let (gi, gw, gb) = kernels::conv2d_backward(val(input), val(weight), g, stride, pad);
            vec![(input, gi), (weight, gw), (bias, gb)]
        }
        &Op::ConvTranspose2d { input, weight, bias, stride, pad } => {
            let (gi, gw, gb) = kernels::conv2d_transpose_backward(val(input), val(weight), g, stride, pad);
            vec![(input, gi), (weight, gw), (bias, gb)]
        }
        &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
        &Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
        &Op::Mul(a, b) => {
            let ga = g.zip_map(val(b), "mul", |g, y| g * y).expect("shape");
            let gb = g.zip_map(val(a), "mul", |g, x| g * x).expect("shape");
            vec![(a, ga), (b, gb)]
        }
        &Op::Scale(a, s) => vec![(a, g.map(|v| v * s))],
        &Op::LeakyRelu(a, alpha) => {
            let ga = g
                .zip_map(val(a), "leaky_relu", |g, x| if x >= 0.0 { g } else { alpha * g })
                .expect("shape");
            vec![(a, ga)]
        }
        &Op::Clamp(a, lo, hi) => {
            let ga = g
                .zip_map(val(a), "clamp", |g, x| if x >= lo && x <= hi { g } else { 0.0 })
                .expect("shape");
            vec![(a, ga)]
        }
        &Op::MeanSquareDiff(a, b) => {
            let n = val(a).len() as f64;
            let scale = 2.0 * g.item() / n;
            let ga = val(a).zip_map(val(b), "mse", |x, y| scale * (x - y)).expect("shape");
            let gb = ga.map(|v| -v);
            vec![(a, ga), (b, gb)]
        }
        &Op::Sum(a) => vec![(a, Tensor::full(val(a).shape(), g.item()))],
        &Op::GlobalAvgPool(a) => {
            let x = val(a);
            let (b, c, h, w) = x.dims4().expect("rank-4");
            let plane = h * w;
            let mut out = vec![0.0; b * c * plane];
            for (i, &gv) in g.data().iter().enumerate() {
                out[i * plane..(i + 1) * plane].fill(gv / plane as f64);
            }
            vec![(a, Tensor::new(x.shape(), out).expect("shape"))]
        }
        Op::GlobalMaxPool(a, argmax) => {
            let mut out = Tensor::zeros(val(*a).shape());
            for (&i, &gv) in argmax.iter().zip(g.data()) {
                out.data_mut()[i] = gv;
            }
            vec![(*a, out)]
        }
        &Op::Linear { input, weight, bias } => {
            let x = val(input);
            let w = val(weight);
            let (batch, fin) = (x.shape()[0], x.shape()[1]);
            let fout = w.shape()[0];
            // dx = g·W, dW = gᵀ·x, db = Σ_batch g
            let mut gx = vec![0.0; batch * fin];
            kernels::gemm(batch, fin, fout, g.data(), w.data(), &mut gx);
            let gt = kernels::transpose(batch, fout, g.data());
            let mut gw = vec![0.0; fout * fin];
            kernels::gemm(fout, fin, batch, &gt, x.data(), &mut gw);
            let mut gb = vec![0.0; fout];
            for row in g.data().chunks(fout) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![
                (input, Tensor::new(x.shape(), gx).expect("shape")),
                (weight, Tensor::new(w.shape(), gw).expect("shape")),
                (bias, Tensor::new(&[fout], gb).expect("shape")),
            ]
        }
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let z = val(*logits);
            let (batch, k) = (z.shape()[0], z.shape()[1]);
            let scale = g.item() / batch as f64;
            let mut out = softmax_rows(z.data(), k);
            for (row, &label) in out.chunks_mut(k).zip(labels) {
                row[label] -= 1.0;
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            vec![(*logits, Tensor::new(&[batch, k], out).expect("shape"))]
        }
        &Op::Bits { latent, loc, log_scale, floor } => {
            let (gy, gloc, gscale) =
                entropy::bits_backward(val(latent), val(loc), val(log_scale), floor, g.item());
            vec![(latent, gy), (loc, gloc), (log_scale, gscale)]
        }
    }
}

pub(crate) fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    /// Borrow of the forward value. Drop it before recording further ops.
    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let a = self.value();
            let b = other.value();
            a.zip_map(&b, name, f)?
        };
        Ok(self.tape.push_op(op(self.id, other.id), value, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    /// Hadamard product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let value = self.value().map(|v| v * factor);
        self.tape.push_op(Op::Scale(self.id, factor), value, &[self.id])
    }

    pub fn leaky_relu(self, alpha: f64) -> Var<'t> {
        let value = self.value().map(|v| if v >= 0.0 { v } else { alpha * v });
        self.tape.push_op(Op::LeakyRelu(self.id, alpha), value, &[self.id])
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::invalid(format!("clamp bounds [{lo}, {hi}] are empty")));
        }
        let value = self.value().map(|v| v.clamp(lo, hi));
        Ok(self.tape.push_op(Op::Clamp(self.id, lo, hi), value, &[self.id]))
    }

    /// Mean over all elements of `(self - other)²`.
    pub fn mean_square_diff(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let a = self.value();
            let b = other.value();
            a.expect_same_shape(&b, "mean_square_diff")?;
            let total: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Tensor::scalar(total / a.len() as f64)
        };
        Ok(self
            .tape
            .push_op(Op::MeanSquareDiff(self.id, other.id), value, &[self.id, other.id]))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.push_op(Op::Sum(self.id), value, &[self.id])
    }

    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(&weight);
        self.same_tape(&bias);
        let value = kernels::conv2d(&self.value(), &weight.value(), &bias.value(), stride, pad)?;
        let op = Op::Conv2d {
            input: self.id,
            weight: weight.id,
            bias: bias.id,
            stride,
            pad,
        };
        Ok(self.tape.push_op(op, value, &[self.id, weight.id, bias.id]))
    }

    pub fn conv2d_transpose(self, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(&weight);
        self.same_tape(&bias);
        let value = kernels::conv2d_transpose(&self.value(), &weight.value(), &bias.value(), stride, pad)?;
        let op = Op::ConvTranspose2d {
            input: self.id,
            weight: weight.id,
            bias: bias.id,
            stride,
            pad,
        };
        Ok(self.tape.push_op(op, value, &[self.id, weight.id, bias.id]))
    }

    /// `[B,C,H,W] → [B,C]` spatial mean.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let (b, c, h, w) = x.dims4()?;
            let plane = h * w;
            let data = x
                .data()
                .chunks(plane)
                .map(|p| p.iter().sum::<f64>() / plane as f64)
                .collect();
            Tensor::new(&[b, c], data)?
        };
        Ok(self.tape.push_op(Op::GlobalAvgPool(self.id), value, &[self.id]))
    }

    /// `[B,C,H,W] → [B,C]` spatial maximum; the gradient goes to the first
    /// maximal element of each plane.
    pub fn global_max_pool(self) -> Result<Var<'t>> {
        let (value, argmax) = {
            let x = self.value();
            let (b, c, h, w) = x.dims4()?;
            let plane = h * w;
            let argmax: Vec<usize> = x
                .data()
                .chunks(plane)
                .enumerate()
                .map(|(k, p)| {
                    let best = (1..plane).fold(0, |best, i| if p[i] > p[best] { i } else { best });
                    k * plane + best
                })
                .collect();
            let data = argmax.iter().map(|&i| x.data()[i]).collect();
            (Tensor::new(&[b, c], data)?, argmax)
        };
        Ok(self.tape.push_op(Op::GlobalMaxPool(self.id, argmax), value, &[self.id]))
    }

    /// `x [B,F] · Wᵀ + b` with `W [O,F]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weight);
        self.same_tape(&bias);
        let value = {
            let x = self.value();
            let w = weight.value();
            let b = bias.value();
            let (&[batch, fin], &[fout, wfin]) = (x.shape(), w.shape()) else {
                return Err(Error::shape("linear", x.shape(), w.shape()));
            };
            if fin != wfin {
                return Err(Error::shape("linear", x.shape(), w.shape()));
            }
            if b.shape() != [fout] {
                return Err(Error::shape("linear bias", b.shape(), &[fout]));
            }
            let wt = kernels::transpose(fout, fin, w.data());
            let mut out: Vec<f64> = (0..batch).flat_map(|_| b.data().iter().copied()).collect();
            kernels::gemm(batch, fout, fin, x.data(), &wt, &mut out);
            Tensor::new(&[batch, fout], out)?
        };
        let op = Op::Linear {
            input: self.id,
            weight: weight.id,
            bias: bias.id,
        };
        Ok(self.tape.push_op(op, value, &[self.id, weight.id, bias.id]))
    }

    /// Mean cross-entropy of `[B,K]` logits against class labels.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let value = {
            let z = self.value();
            let &[batch, k] = z.shape() else {
                return Err(Error::invalid(format!("logits must be [B,K], got {:?}", z.shape())));
            };
            if labels.len() != batch {
                return Err(Error::invalid(format!("{} labels for batch of {batch}", labels.len())));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
            }
            let mut total = 0.0;
            for (row, &label) in z.data().chunks(k).zip(labels) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[label];
            }
            Tensor::scalar(total / batch as f64)
        };
        let op = Op::SoftmaxCrossEntropy {
            logits: self.id,
            labels: labels.to_vec(),
        };
        Ok(self.tape.push_op(op, value, &[self.id]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_square_gradient_is_two_x_over_n() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[4]));
        let loss = x.mean_square_diff(zero).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.data(), &[0.5, -1.0, 0.25, 1.5]);
        assert!(tape.grad(zero).is_none());
    }

    #[test]
    fn product_of_scalars() {
        let tape = Tape::new();
        let c = tape.leaf(Tensor::scalar(3.0));
        let s = tape.leaf(Tensor::scalar(-5.0));
        let loss = c.mul(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(c).unwrap().item(), -5.0);
        assert_eq!(tape.grad(s).unwrap().item(), 3.0);
    }

    #[test]
    fn off_path_leaf_gets_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let unused = tape.leaf(Tensor::ones(&[2]));
        let loss = x.sum();
        let _also_unused = unused.scale(2.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        let once = tape.grad(x).unwrap();
        tape.backward(loss).unwrap();
        let twice = tape.grad(x).unwrap();
        assert_eq!(twice, once.map(|v| 2.0 * v));
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn reused_variable_sums_contributions() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let loss = x.add(x).unwrap().mul(x).unwrap(); // 2x²
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 8.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_visits_each_op_once() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        let y = x.scale(2.0).leaky_relu(0.2);
        let loss = y.sum();
        assert_eq!(tape.backward(loss).unwrap(), 4);
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::new(&[3], vec![1.0, -1.0, 0.0]).unwrap());
        assert_eq!(v.leaky_relu(0.2).value().data(), &[1.0, -0.2, 0.0]);
        let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        assert_eq!(a.mul(b).unwrap().value().data(), &[5.0, 0.0, 0.0, 8.0]);
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        assert_eq!(*b.add(z).unwrap().value(), *b.value());
        let c = v.clamp(-0.5, 0.5).unwrap();
        assert_eq!(c.value().data(), &[0.5, -0.5, 0.0]);
        let wrong = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(a.add(wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn mean_square_diff_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[4], vec![0.5, 0.2, 0.1, 0.9]).unwrap());
        let b = tape.constant(Tensor::new(&[4], vec![0.3, 0.4, 0.1, 0.5]).unwrap());
        assert!((a.mean_square_diff(b).unwrap().item() - 0.06).abs() < 1e-15);
        assert_eq!(a.mean_square_diff(a).unwrap().item(), 0.0);
        let ones = tape.constant(Tensor::ones(&[2, 2]));
        let zeros = tape.constant(Tensor::zeros(&[2, 2]));
        assert_eq!(ones.mean_square_diff(zeros).unwrap().item(), 1.0);
        assert!(a.mean_square_diff(ones).is_err());
    }
}
