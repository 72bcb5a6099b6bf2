use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use rand::Rng;

use super::kernels::{self, Conv1dGeom, Conv2dGeom};
use super::{broadcast_binary, numel, reduce_to_shape, split_axis, Tensor};
use crate::error::{contract, Error, Result};

/// A linear map with a known adjoint, recorded on the tape as a single node.
///
/// Used for transforms whose fast forward algorithm is not a composition of
/// tape primitives (IMDCT, sliding mean normalization).
pub trait LinearOp {
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
    /// Applies the transpose of the map to an output-shaped gradient.
    fn adjoint(&self, grad: &Tensor) -> Tensor;
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Log(usize),
    Exp(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Square(usize),
    Sqrt(usize),
    Scale(usize, f64),
    Shift(usize),
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        geom: Conv2dGeom,
        c_out: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        geom: Conv1dGeom,
        c_out: usize,
        batch: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    Sum {
        a: usize,
        axis: Option<usize>,
    },
    Mean {
        a: usize,
        axis: Option<usize>,
    },
    Max {
        a: usize,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        axis: usize,
        x_hat: Tensor,
        inv_std: Vec<f64>,
    },
    Transpose(usize),
    Reshape(usize),
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        a: usize,
        index: Rc<[usize]>,
    },
    ScatterAdd {
        a: usize,
        index: Rc<[usize]>,
    },
    Linear {
        a: usize,
        op: Rc<dyn LinearOp>,
    },
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    is_param: bool,
    op: Op,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to the tape's parameters.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` on it is an error.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    /// A differentiable leaf whose gradient `backward` reports.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, self.grad_enabled)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            is_param: requires_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, inputs: &[usize], op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            is_param: false,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        contract!(!parts.is_empty(), "concat of zero tensors");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape();
        contract!(
            axis < first.len(),
            "concat axis {axis} out of range for {first:?}"
        );
        let mut out_shape = first.to_vec();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            contract!(
                compatible,
                "cannot concat {s:?} with {first:?} on axis {axis}"
            );
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            out,
            &ids,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        contract!(self.grad_enabled, "backward on a no-grad tape");
        contract!(
            std::ptr::eq(loss.tape, self),
            "loss belongs to a different tape"
        );
        let nodes = self.nodes.borrow();
        contract!(
            nodes[loss.id].value.len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            nodes[loss.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                if !node.is_param {
                    grads[id] = None;
                }
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn backward_node(
    nodes: &[Node],
    node: &Node,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, reduce_to_shape(g, val(*a).shape()));
            accumulate(nodes, grads, *b, reduce_to_shape(g, val(*b).shape()));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, reduce_to_shape(g, val(*a).shape()));
            let neg = g.map(|v| -v);
            accumulate(nodes, grads, *b, reduce_to_shape(&neg, val(*b).shape()));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                let ga = broadcast_binary(g, vb, |x, y| x * y)?;
                accumulate(nodes, grads, *a, reduce_to_shape(&ga, va.shape()));
            }
            if nodes[*b].requires_grad {
                let gb = broadcast_binary(g, va, |x, y| x * y)?;
                accumulate(nodes, grads, *b, reduce_to_shape(&gb, vb.shape()));
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                let ga = broadcast_binary(g, vb, |x, y| x / y)?;
                accumulate(nodes, grads, *a, reduce_to_shape(&ga, va.shape()));
            }
            if nodes[*b].requires_grad {
                // d(a/b)/db = -out / b
                let q = broadcast_binary(out, vb, |o, y| -o / y)?;
                let gb = zip_map(g, &q, |x, y| x * y);
                accumulate(nodes, grads, *b, reduce_to_shape(&gb, vb.shape()));
            }
        }
        Op::Neg(a) => accumulate(nodes, grads, *a, g.map(|v| -v)),
        Op::Log(a) => accumulate(nodes, grads, *a, zip_map(g, val(*a), |g, x| g / x)),
        Op::Exp(a) => accumulate(nodes, grads, *a, zip_map(g, out, |g, y| g * y)),
        Op::Sigmoid(a) => accumulate(nodes, grads, *a, zip_map(g, out, |g, y| g * y * (1.0 - y))),
        Op::Tanh(a) => accumulate(nodes, grads, *a, zip_map(g, out, |g, y| g * (1.0 - y * y))),
        Op::Relu(a) => accumulate(
            nodes,
            grads,
            *a,
            zip_map(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
        ),
        Op::Square(a) => accumulate(nodes, grads, *a, zip_map(g, val(*a), |g, x| 2.0 * g * x)),
        Op::Sqrt(a) => accumulate(nodes, grads, *a, zip_map(g, out, |g, y| 0.5 * g / y)),
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.map(|v| v * c)),
        Op::Shift(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::Clamp { a, lo, hi } => accumulate(
            nodes,
            grads,
            *a,
            zip_map(
                g,
                val(*a),
                |g, x| if x >= *lo && x <= *hi { g } else { 0.0 },
            ),
        ),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga, 0.0);
                accumulate(nodes, grads, *a, Tensor::new(&[m, k], ga)?);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, va.data(), true, g.data(), false, &mut gb, 0.0);
                accumulate(nodes, grads, *b, Tensor::new(&[k, n], gb)?);
            }
        }
        Op::Conv2d { x, w, geom, c_out } => {
            let (vx, vw) = (val(*x), val(*w));
            let (rows, cols) = (geom.rows(), geom.cols());
            let mut patches = vec![0.0; rows * cols];
            kernels::im2col_2d(vx.data(), *geom, &mut patches);
            if nodes[*w].requires_grad {
                let mut gw = vec![0.0; c_out * rows];
                kernels::gemm(
                    *c_out,
                    cols,
                    rows,
                    g.data(),
                    false,
                    &patches,
                    true,
                    &mut gw,
                    0.0,
                );
                accumulate(nodes, grads, *w, Tensor::new(vw.shape(), gw)?);
            }
            if nodes[*x].requires_grad {
                // reuse the patch buffer for the patch gradients
                kernels::gemm(
                    rows,
                    *c_out,
                    cols,
                    vw.data(),
                    true,
                    g.data(),
                    false,
                    &mut patches,
                    0.0,
                );
                let mut gx = vec![0.0; vx.len()];
                kernels::col2im_2d(&patches, *geom, &mut gx);
                accumulate(nodes, grads, *x, Tensor::new(vx.shape(), gx)?);
            }
        }
        Op::Conv1d {
            x,
            w,
            geom,
            c_out,
            batch,
        } => {
            let (vx, vw) = (val(*x), val(*w));
            let (rows, t_out) = (geom.rows(), geom.t_out());
            let in_per = geom.c_in * geom.t_in;
            let out_per = c_out * t_out;
            let mut patches = vec![0.0; rows * t_out];
            let mut gw = vec![0.0; c_out * rows];
            let mut gx = vec![0.0; vx.len()];
            for bi in 0..*batch {
                let xb = &vx.data()[bi * in_per..(bi + 1) * in_per];
                let gb = &g.data()[bi * out_per..(bi + 1) * out_per];
                kernels::im2col_1d(xb, *geom, &mut patches);
                kernels::gemm(*c_out, t_out, rows, gb, false, &patches, true, &mut gw, 1.0);
                kernels::gemm(
                    rows,
                    *c_out,
                    t_out,
                    vw.data(),
                    true,
                    gb,
                    false,
                    &mut patches,
                    0.0,
                );
                kernels::col2im_1d(&patches, *geom, &mut gx[bi * in_per..(bi + 1) * in_per]);
            }
            accumulate(nodes, grads, *w, Tensor::new(vw.shape(), gw)?);
            accumulate(nodes, grads, *x, Tensor::new(vx.shape(), gx)?);
        }
        Op::Softmax { a, axis } => {
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            let (y, gd) = (out.data(), g.data());
            let mut ga = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let dot: f64 = (0..n)
                        .map(|j| gd[base + j * inner] * y[base + j * inner])
                        .sum();
                    for j in 0..n {
                        let p = base + j * inner;
                        ga[p] = y[p] * (gd[p] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(out.shape(), ga)?);
        }
        Op::Sum { a, axis } | Op::Mean { a, axis } => {
            let va = val(*a);
            let count = match axis {
                None => va.len(),
                Some(ax) => va.shape()[*ax],
            };
            let scale = if matches!(node.op, Op::Mean { .. }) {
                1.0 / count as f64
            } else {
                1.0
            };
            let ga = match axis {
                None => Tensor::full(va.shape(), g.item() * scale),
                Some(ax) => {
                    let (outer, n, inner) = split_axis(va.shape(), *ax);
                    let mut d = vec![0.0; va.len()];
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                d[(o * n + j) * inner + i] = g.data()[o * inner + i] * scale;
                            }
                        }
                    }
                    Tensor::new(va.shape(), d)?
                }
            };
            accumulate(nodes, grads, *a, ga);
        }
        Op::Max { a, argmax } => {
            let va = val(*a);
            let mut d = vec![0.0; va.len()];
            for (k, &p) in argmax.iter().enumerate() {
                d[p] += g.data()[k];
            }
            accumulate(nodes, grads, *a, Tensor::new(va.shape(), d)?);
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let vp = val(p);
                let width = vp.shape()[*axis];
                if nodes[p].requires_grad {
                    let mut d = Vec::with_capacity(vp.len());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[start..start + width * inner]);
                    }
                    accumulate(nodes, grads, p, Tensor::new(vp.shape(), d)?);
                }
                offset += width;
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            axis,
            x_hat,
            inv_std,
        } => {
            let vgamma = val(*gamma);
            let (outer, c, inner) = split_axis(x_hat.shape(), *axis);
            let n = (outer * inner) as f64;
            let mut sg = vec![0.0; c];
            let mut sgx = vec![0.0; c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        sg[ch] += g.data()[i];
                        sgx[ch] += g.data()[i] * x_hat.data()[i];
                    }
                }
            }
            if nodes[*x].requires_grad {
                let mut dx = vec![0.0; x_hat.len()];
                for o in 0..outer {
                    for ch in 0..c {
                        let k = vgamma.data()[ch] * inv_std[ch] / n;
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            dx[i] = k * (n * g.data()[i] - sg[ch] - x_hat.data()[i] * sgx[ch]);
                        }
                    }
                }
                accumulate(nodes, grads, *x, Tensor::new(x_hat.shape(), dx)?);
            }
            accumulate(nodes, grads, *gamma, Tensor::new(vgamma.shape(), sgx)?);
            accumulate(nodes, grads, *beta, Tensor::new(val(*beta).shape(), sg)?);
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose2()),
        Op::Narrow { a, axis, start } => {
            if nodes[*a].requires_grad {
                let src = val(*a);
                let (outer, total, inner) = split_axis(src.shape(), *axis);
                let width = g.shape()[*axis];
                let mut d = vec![0.0; src.len()];
                for o in 0..outer {
                    let at = (o * total + start) * inner;
                    d[at..at + width * inner]
                        .copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
                }
                accumulate(nodes, grads, *a, Tensor::new(src.shape(), d)?);
            }
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.clone().reshape(val(*a).shape())?),
        Op::Gather { a, index } => {
            let va = val(*a);
            let mut d = vec![0.0; va.len()];
            for (k, &p) in index.iter().enumerate() {
                d[p] += g.data()[k];
            }
            accumulate(nodes, grads, *a, Tensor::new(va.shape(), d)?);
        }
        Op::ScatterAdd { a, index } => {
            let va = val(*a);
            let d = index.iter().map(|&p| g.data()[p]).collect();
            accumulate(nodes, grads, *a, Tensor::new(va.shape(), d)?);
        }
        Op::Linear { a, op } => accumulate(nodes, grads, *a, op.adjoint(g)),
    }
    Ok(())
}

/// Element-wise operation codes accepted by [`Var::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Log,
    Exp,
    Sigmoid,
    Tanh,
    Relu,
    Square,
    Sqrt,
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        contract!(
            std::ptr::eq(self.tape, other.tape),
            "operands live on different tapes"
        );
        Ok(())
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let out = broadcast_binary(&self.value(), &other.value(), f)?;
        Ok(self
            .tape
            .push(out, &[self.id, other.id], op(self.id, other.id)))
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.push(out, &[self.id], op)
    }

    /// Dispatches an element-wise operation by code; binary codes need `other`.
    pub fn elementwise(self, code: Elementwise, other: Option<Var<'t>>) -> Result<Var<'t>> {
        use Elementwise::*;
        let need = |o: Option<Var<'t>>| {
            o.ok_or_else(|| Error::Contract(format!("{code:?} needs a second operand")))
        };
        match code {
            Add => self.add(need(other)?),
            Sub => self.sub(need(other)?),
            Mul => self.mul(need(other)?),
            Div => self.div(need(other)?),
            Neg => Ok(self.neg()),
            Log => self.log(),
            Exp => Ok(self.exp()),
            Sigmoid => Ok(self.sigmoid()),
            Tanh => Ok(self.tanh()),
            Relu => Ok(self.relu()),
            Square => Ok(self.square()),
            Sqrt => self.sqrt(),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a + b, Op::Add)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a - b, Op::Sub)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a * b, Op::Mul)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a / b, Op::Div)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Var<'t> {
        self.unary(|v| -v, Op::Neg(self.id))
    }

    pub fn log(self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(f64::ln, Op::Log(self.id)))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|v| v * v, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain(format!("sqrt of non-positive value {bad}")));
        }
        Ok(self.unary(f64::sqrt, Op::Sqrt(self.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|v| v * c, Op::Scale(self.id, c))
    }

    pub fn shift(self, c: f64) -> Var<'t> {
        self.unary(|v| v + c, Op::Shift(self.id))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp binds.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(|v| v.clamp(lo, hi), Op::Clamp { a: self.id, lo, hi })
    }

    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.clamp(lo, f64::INFINITY)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        contract!(
            a.rank() == 2 && b.rank() == 2,
            "matmul needs matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        );
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        contract!(
            b.shape()[0] == k,
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
        let out = Tensor::new(&[m, n], c)?;
        Ok(self
            .tape
            .push(out, &[self.id, other.id], Op::MatMul(self.id, other.id)))
    }

    /// Stride-1 cross-correlation with zero "same" padding.
    ///
    /// `self` is `C_in x H x W`, `kernels` is `C_out x C_in x kh x kw` with odd
    /// kernel extents.
    pub fn conv2d(self, kernels: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&kernels)?;
        let (x, w) = (self.value(), kernels.value());
        contract!(
            x.rank() == 3 && w.rank() == 4,
            "conv2d expects C x H x W input and 4-D kernels, got {:?} and {:?}",
            x.shape(),
            w.shape()
        );
        let (c_out, c_in, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        contract!(
            x.shape()[0] == c_in,
            "conv2d channel mismatch: input has {}, kernels expect {c_in}",
            x.shape()[0]
        );
        contract!(
            kh % 2 == 1 && kw % 2 == 1,
            "conv2d kernels must be odd-sized"
        );
        let geom = Conv2dGeom {
            c_in,
            h: x.shape()[1],
            w: x.shape()[2],
            kh,
            kw,
        };
        let mut patches = vec![0.0; geom.rows() * geom.cols()];
        kernels::im2col_2d(x.data(), geom, &mut patches);
        let mut y = vec![0.0; c_out * geom.cols()];
        kernels::gemm(
            c_out,
            geom.rows(),
            geom.cols(),
            w.data(),
            false,
            &patches,
            false,
            &mut y,
            0.0,
        );
        let out = Tensor::new(&[c_out, geom.h, geom.w], y)?;
        Ok(self.tape.push(
            out,
            &[self.id, kernels.id],
            Op::Conv2d {
                x: self.id,
                w: kernels.id,
                geom,
                c_out,
            },
        ))
    }

    /// Valid dilated temporal convolution over `C_in x T` or `B x C_in x T`.
    pub fn conv1d(self, kernels: Var<'t>, dilation: usize) -> Result<Var<'t>> {
        self.same_tape(&kernels)?;
        let (x, w) = (self.value(), kernels.value());
        contract!(dilation >= 1, "dilation must be positive");
        contract!(
            (x.rank() == 2 || x.rank() == 3) && w.rank() == 3,
            "conv1d expects [B x] C x T input and C_out x C_in x k kernels, got {:?} and {:?}",
            x.shape(),
            w.shape()
        );
        let (batch, c_in, t_in) = if x.rank() == 2 {
            (1, x.shape()[0], x.shape()[1])
        } else {
            (x.shape()[0], x.shape()[1], x.shape()[2])
        };
        let (c_out, wc_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        contract!(
            c_in == wc_in,
            "conv1d channel mismatch: input has {c_in}, kernels expect {wc_in}"
        );
        let min_len = (k - 1) * dilation + 1;
        contract!(
            t_in >= min_len,
            "conv1d input too short: {t_in} frames, need at least {min_len}"
        );
        let geom = Conv1dGeom {
            c_in,
            t_in,
            k,
            dilation,
        };
        let t_out = geom.t_out();
        let mut patches = vec![0.0; geom.rows() * t_out];
        let mut y = vec![0.0; batch * c_out * t_out];
        for bi in 0..batch {
            kernels::im2col_1d(
                &x.data()[bi * c_in * t_in..(bi + 1) * c_in * t_in],
                geom,
                &mut patches,
            );
            kernels::gemm(
                c_out,
                geom.rows(),
                t_out,
                w.data(),
                false,
                &patches,
                false,
                &mut y[bi * c_out * t_out..(bi + 1) * c_out * t_out],
                0.0,
            );
        }
        let shape = if x.rank() == 2 {
            vec![c_out, t_out]
        } else {
            vec![batch, c_out, t_out]
        };
        let out = Tensor::new(&shape, y)?;
        Ok(self.tape.push(
            out,
            &[self.id, kernels.id],
            Op::Conv1d {
                x: self.id,
                w: kernels.id,
                geom,
                c_out,
                batch,
            },
        ))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        contract!(axis < a.rank().max(1), "softmax axis {axis} out of range");
        let shape = if a.rank() == 0 {
            vec![1]
        } else {
            a.shape().to_vec()
        };
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut y = vec![0.0; a.len()];
        let x = a.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let m = (0..n)
                    .map(|j| x[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..n {
                    let e = (x[base + j * inner] - m).exp();
                    y[base + j * inner] = e;
                    s += e;
                }
                for j in 0..n {
                    y[base + j * inner] /= s;
                }
            }
        }
        let out = Tensor::new(a.shape(), y)?;
        Ok(self
            .tape
            .push(out, &[self.id], Op::Softmax { a: self.id, axis }))
    }

    fn reduce(self, axis: Option<usize>, mean: bool) -> Result<Var<'t>> {
        let a = self.value();
        contract!(!a.is_empty(), "empty reduction");
        let out = match axis {
            None => {
                let s: f64 = a.data().iter().sum();
                Tensor::scalar(if mean { s / a.len() as f64 } else { s })
            }
            Some(ax) => {
                contract!(ax < a.rank(), "axis {ax} out of range for {:?}", a.shape());
                let (outer, n, inner) = split_axis(a.shape(), ax);
                let mut d = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            d[o * inner + i] += a.data()[(o * n + j) * inner + i];
                        }
                    }
                }
                if mean {
                    d.iter_mut().for_each(|v| *v /= n as f64);
                }
                let mut shape = a.shape().to_vec();
                shape.remove(ax);
                Tensor { shape, data: d }
            }
        };
        let op = if mean {
            Op::Mean { a: self.id, axis }
        } else {
            Op::Sum { a: self.id, axis }
        };
        Ok(self.tape.push(out, &[self.id], op))
    }

    pub fn sum(self) -> Var<'t> {
        self.reduce(None, false).expect("tensors are never empty")
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(Some(axis), false)
    }

    pub fn mean(self) -> Var<'t> {
        self.reduce(None, true).expect("tensors are never empty")
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(Some(axis), true)
    }

    /// Maximum (over everything, or along `axis`) with the position of the
    /// maximum along the reduced extent. Ties resolve to the lowest index.
    pub fn max_with_index(self, axis: Option<usize>) -> Result<(Var<'t>, Vec<usize>)> {
        let a = self.value();
        let (outer, n, inner) = match axis {
            None => (1, a.len(), 1),
            Some(ax) => {
                contract!(ax < a.rank(), "axis {ax} out of range for {:?}", a.shape());
                split_axis(a.shape(), ax)
            }
        };
        contract!(n > 0, "empty reduction");
        let mut vals = Vec::with_capacity(outer * inner);
        let mut flat = Vec::with_capacity(outer * inner);
        let mut local = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = a.data()[o * n * inner + i];
                for j in 1..n {
                    let v = a.data()[(o * n + j) * inner + i];
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                vals.push(best_v);
                flat.push((o * n + best) * inner + i);
                local.push(best);
            }
        }
        let out = match axis {
            None => Tensor::scalar(vals[0]),
            Some(ax) => {
                let mut shape = a.shape().to_vec();
                shape.remove(ax);
                Tensor { shape, data: vals }
            }
        };
        let var = self.tape.push(
            out,
            &[self.id],
            Op::Max {
                a: self.id,
                argmax: flat,
            },
        );
        Ok((var, local))
    }

    /// Training-mode batch normalization over every axis except `axis`.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        axis: usize,
        eps: f64,
    ) -> Result<(Var<'t>, BatchStats)> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let x = self.value();
        let (vg, vb) = (gamma.value(), beta.value());
        contract!(
            axis < x.rank(),
            "batch_norm axis {axis} out of range for {:?}",
            x.shape()
        );
        let (outer, c, inner) = split_axis(x.shape(), axis);
        contract!(
            vg.shape() == [c] && vb.shape() == [c],
            "batch_norm affine parameters must have shape [{c}]"
        );
        let count = outer * inner;
        contract!(
            count >= 2,
            "batch_norm needs at least 2 elements per channel, got {count}"
        );
        let n = count as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                mean[ch] += x.data()[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                var[ch] += x.data()[base..base + inner]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut x_hat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                    x_hat[i] = h;
                    y[i] = vg.data()[ch] * h + vb.data()[ch];
                }
            }
        }
        let out = Tensor::new(x.shape(), y)?;
        let x_hat = Tensor::new(x.shape(), x_hat)?;
        let var_out = self.tape.push(
            out,
            &[self.id, gamma.id, beta.id],
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                axis,
                x_hat,
                inv_std,
            },
        );
        Ok((var_out, BatchStats { mean, var, count }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        contract!(
            a.rank() == 2,
            "transpose needs a matrix, got {:?}",
            a.shape()
        );
        Ok(self
            .tape
            .push(a.transpose2(), &[self.id], Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(out, &[self.id], Op::Reshape(self.id)))
    }

    /// The `len` slices starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        contract!(
            axis < a.rank(),
            "narrow axis {axis} out of range for {:?}",
            a.shape()
        );
        let (outer, total, inner) = split_axis(a.shape(), axis);
        contract!(
            len >= 1 && start + len <= total,
            "narrow [{start}, {}) exceeds extent {total}",
            start + len
        );
        let mut d = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let at = (o * total + start) * inner;
            d.extend_from_slice(&a.data()[at..at + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, d)?;
        Ok(self.tape.push(
            out,
            &[self.id],
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
        ))
    }

    /// `out[i] = self.flat[index[i]]`, shaped as `shape`.
    pub fn gather(self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        contract!(
            numel(shape) == index.len(),
            "gather shape {shape:?} does not hold {} indices",
            index.len()
        );
        contract!(
            index.iter().all(|&i| i < a.len()),
            "gather index out of range for {} elements",
            a.len()
        );
        let data = index.iter().map(|&i| a.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self
            .tape
            .push(out, &[self.id], Op::Gather { a: self.id, index }))
    }

    /// `out.flat[index[i]] += self.flat[i]` into a zero tensor of `shape`.
    pub fn scatter_add(self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        contract!(
            index.len() == a.len(),
            "scatter_add needs one index per element ({} vs {})",
            index.len(),
            a.len()
        );
        let n = numel(shape);
        contract!(
            index.iter().all(|&i| i < n),
            "scatter_add index out of range"
        );
        let mut data = vec![0.0; n];
        for (&i, &v) in index.iter().zip(a.data()) {
            data[i] += v;
        }
        let out = Tensor::new(shape, data)?;
        Ok(self
            .tape
            .push(out, &[self.id], Op::ScatterAdd { a: self.id, index }))
    }

    pub fn linear(self, op: Rc<dyn LinearOp>) -> Result<Var<'t>> {
        let out = op.forward(&self.value())?;
        Ok(self
            .tape
            .push(out, &[self.id], Op::Linear { a: self.id, op }))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`. Identity outside training.
    pub fn dropout<R: Rng + ?Sized>(
        self,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var<'t>> {
        contract!(
            (0.0..1.0).contains(&rate),
            "dropout rate must lie in [0, 1), got {rate}"
        );
        if !training || rate == 0.0 {
            return Ok(self);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape();
        let mask: Vec<f64> = (0..numel(&shape))
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = self.tape.constant(Tensor::new(&shape, mask)?);
        self.mul(mask)
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
