//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Gradients are
//! obtained with [`Tape::backward`]. The vector-Jacobian products themselves
//! are expressed as tape operations, so [`Tape::backward_differentiable`] can
//! leave the gradient graph on the tape, where a second (ordinary) backward
//! pass can differentiate through it. This is what makes a gradient-norm
//! penalty trainable.
//!
//! Only one level of nesting is supported: gradients produced by a
//! differentiable backward pass cannot themselves be differentiated
//! differentiably again.
//!
//! ```
//! use lipgan::autodiff::Tape;
//! use lipgan::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let y = x.square().sum();
//! let grads = tape.backward(y, &[x]).unwrap();
//! assert_eq!(grads[0].data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
enum Op {
    Leaf,
    Matmul,
    Transpose,
    /// `[B, n] + [n]`, the bias is added to every row.
    AddBias,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    /// Tensor times a one-element node.
    ScaleBy,
    Square,
    Sqrt,
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Sigmoid,
    Softplus,
    LeakyRelu(f64),
    SumAll,
    /// `[B, n] -> [n]`
    SumRows,
    /// `[B, n] -> [B]`
    SumCols,
    BroadcastScalar(Vec<usize>),
    /// `[n] -> [rows, n]`
    BroadcastRows(usize),
    /// `[B] -> [B, cols]`
    BroadcastCols(usize),
    Reshape(Vec<usize>),
}

struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    /// 0 for ordinary forward nodes, 1 for nodes recorded by a
    /// differentiable backward pass (or anything computed from them).
    level: u8,
}

/// Append-only record of operations.
///
/// A tape is single-threaded. Use one tape per forward/backward round and
/// drop it afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording_level: Cell<u8>,
}

/// Handle to a node on a [`Tape`].
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

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow for large `|x|`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let unary = |f: fn(f64) -> f64| Ok(inputs[0].map(f));
    match op {
        Op::Leaf => Err(Error::Usage("leaf nodes have no forward rule".into())),
        Op::Matmul => inputs[0].matmul(inputs[1]),
        Op::Transpose => inputs[0].transpose(),
        Op::AddBias => {
            let (x, b) = (inputs[0], inputs[1]);
            if x.shape().len() != 2 || b.shape() != [x.shape()[1]] {
                return Err(Error::Config(format!(
                    "bias {:?} does not fit rows of {:?}",
                    b.shape(),
                    x.shape()
                )));
            }
            let n = b.numel();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Ok(out)
        }
        Op::Add => inputs[0].zip_map(inputs[1], |a, b| a + b),
        Op::Sub => inputs[0].zip_map(inputs[1], |a, b| a - b),
        Op::Mul => inputs[0].zip_map(inputs[1], |a, b| a * b),
        Op::Div => inputs[0].zip_map(inputs[1], |a, b| a / b),
        Op::Neg => unary(|v| -v),
        Op::Scale(c) => Ok(inputs[0].map(|v| v * c)),
        Op::AddScalar(c) => Ok(inputs[0].map(|v| v + c)),
        Op::ScaleBy => {
            let s = inputs[1].item().map_err(|_| {
                Error::Config(format!(
                    "scale_by needs a one-element factor, got {:?}",
                    inputs[1].shape()
                ))
            })?;
            Ok(inputs[0].map(|v| v * s))
        }
        Op::Square => unary(|v| v * v),
        Op::Sqrt => {
            if let Some(bad) = inputs[0].data().iter().find(|v| **v < 0.0) {
                return Err(Error::Domain(format!("sqrt of negative value {bad}")));
            }
            unary(f64::sqrt)
        }
        Op::Exp => unary(f64::exp),
        Op::Log => {
            if let Some(bad) = inputs[0].data().iter().find(|v| !(**v > 0.0)) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
            unary(f64::ln)
        }
        Op::Sin => unary(f64::sin),
        Op::Cos => unary(f64::cos),
        Op::Tanh => unary(f64::tanh),
        Op::Sigmoid => unary(sigmoid),
        Op::Softplus => unary(softplus),
        Op::LeakyRelu(slope) => Ok(inputs[0].map(|v| if v > 0.0 { v } else { slope * v })),
        Op::SumAll => Ok(Tensor::scalar(inputs[0].sum())),
        Op::SumRows => {
            let x = inputs[0];
            if x.shape().len() != 2 {
                return Err(Error::Config(format!("sum_rows needs a matrix, got {:?}", x.shape())));
            }
            let n = x.shape()[1];
            let mut out = vec![0.0; n];
            for row in x.data().chunks(n.max(1)) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Ok(Tensor::vector(out))
        }
        Op::SumCols => {
            let x = inputs[0];
            if x.shape().len() != 2 {
                return Err(Error::Config(format!("sum_cols needs a matrix, got {:?}", x.shape())));
            }
            let n = x.shape()[1];
            let out = (0..x.shape()[0])
                .map(|r| x.data()[r * n..(r + 1) * n].iter().sum())
                .collect();
            Ok(Tensor::vector(out))
        }
        Op::BroadcastScalar(shape) => Ok(Tensor::filled(shape, inputs[0].item()?)),
        Op::BroadcastRows(rows) => {
            let x = inputs[0];
            if x.shape().len() != 1 {
                return Err(Error::Config(format!(
                    "broadcast_rows needs a vector, got {:?}",
                    x.shape()
                )));
            }
            let n = x.numel();
            let mut data = Vec::with_capacity(rows * n);
            for _ in 0..*rows {
                data.extend_from_slice(x.data());
            }
            Tensor::matrix(*rows, n, data)
        }
        Op::BroadcastCols(cols) => {
            let x = inputs[0];
            if x.shape().len() != 1 {
                return Err(Error::Config(format!(
                    "broadcast_cols needs a vector, got {:?}",
                    x.shape()
                )));
            }
            let data = x.data().iter().flat_map(|&v| std::iter::repeat_n(v, *cols)).collect();
            Tensor::matrix(x.numel(), *cols, data)
        }
        Op::Reshape(shape) => inputs[0].clone().reshape(shape.clone()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf: parameters, or inputs whose gradient is wanted.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            parents: Vec::new(),
            value,
            requires_grad,
            level: self.recording_level.get(),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        let mut nodes = self.nodes.borrow_mut();
        let value = {
            let inputs: Vec<&Tensor> = parents.iter().map(|&p| &nodes[p].value).collect();
            forward(&op, &inputs)?
        };
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let level = parents
            .iter()
            .map(|&p| nodes[p].level)
            .fold(self.recording_level.get(), u8::max);
        nodes.push(Node {
            op,
            parents: parents.to_vec(),
            value,
            requires_grad,
            level,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Infallible variant for ops whose shape contract is already guaranteed.
    fn push_ok(&self, op: Op, parents: &[usize]) -> Var<'_> {
        self.push(op, parents).expect("shape-preserving op cannot fail")
    }

    fn owns(&self, v: &Var<'_>) -> bool {
        std::ptr::eq(self, v.tape) && v.id < self.len()
    }

    /// Gradients of a one-element `output` with respect to each of `wrt`.
    ///
    /// Nodes recorded while computing the gradients are discarded before
    /// returning, so the tape is left as it was.
    pub fn backward(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        self.check_backward_args(&output, wrt)?;
        let mark = self.len();
        let saved = self.recording_level.get();
        let out_level = self.nodes.borrow()[output.id].level;
        self.recording_level.set(out_level.saturating_add(1));
        let result = self.reverse_sweep(output, wrt).map(|grads| {
            let nodes = self.nodes.borrow();
            grads
                .iter()
                .zip(wrt)
                .map(|(g, w)| match g {
                    Some(id) => nodes[*id].value.clone(),
                    None => Tensor::zeros(nodes[w.id].value.shape()),
                })
                .collect()
        });
        self.recording_level.set(saved);
        self.nodes.borrow_mut().truncate(mark);
        result
    }

    /// Like [`Tape::backward`], but the gradient computation stays on the
    /// tape and the returned gradients are themselves differentiable.
    ///
    /// Fails if `output` was itself produced from a differentiable backward
    /// pass (third-order derivatives are not supported).
    pub fn backward_differentiable<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        self.check_backward_args(&output, wrt)?;
        if self.nodes.borrow()[output.id].level > 0 {
            return Err(Error::Usage(
                "differentiable backward through gradient nodes (third order) is not supported".into(),
            ));
        }
        let saved = self.recording_level.get();
        self.recording_level.set(1);
        let result = self.reverse_sweep(output, wrt).map(|grads| {
            grads
                .iter()
                .zip(wrt)
                .map(|(g, w)| match g {
                    Some(id) => Var { tape: self, id: *id },
                    None => self.constant(Tensor::zeros(&w.shape())),
                })
                .collect()
        });
        self.recording_level.set(saved);
        result
    }

    fn check_backward_args(&self, output: &Var<'_>, wrt: &[Var<'_>]) -> Result<()> {
        if !self.owns(output) {
            return Err(Error::Usage("backward output is not on this tape".into()));
        }
        if let Some(w) = wrt.iter().find(|w| !self.owns(w)) {
            return Err(Error::Usage(format!("gradient target {w:?} is not on this tape")));
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id].value;
        if out.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        Ok(())
    }

    fn reverse_sweep(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Option<usize>>> {
        let n = output.id + 1;
        // Nodes on a path from some `wrt` leaf to `output`.
        let mut needed = vec![false; n];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id < n {
                    needed[w.id] = true;
                }
            }
            for i in 0..n {
                if !needed[i] && nodes[i].parents.iter().any(|&p| needed[p]) {
                    needed[i] = true;
                }
            }
        }
        let mut grads: Vec<Option<usize>> = vec![None; n];
        if needed[output.id] {
            let shape = self.nodes.borrow()[output.id].value.shape().to_vec();
            grads[output.id] = Some(self.constant(Tensor::filled(&shape, 1.0)).id);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            let (op, parents) = {
                let nodes = self.nodes.borrow();
                (nodes[i].op.clone(), nodes[i].parents.clone())
            };
            if parents.is_empty() {
                continue;
            }
            let want: Vec<bool> = parents.iter().map(|&p| needed[p]).collect();
            if !want.iter().any(|&w| w) {
                continue;
            }
            let contributions = self.vjp(&op, i, &parents, g, &want)?;
            for ((&p, c), w) in parents.iter().zip(contributions).zip(&want) {
                let (Some(c), true) = (c, *w) else { continue };
                grads[p] = Some(match grads[p] {
                    Some(prev) => self.push(Op::Add, &[prev, c.id])?.id,
                    None => c.id,
                });
            }
        }
        Ok(wrt.iter().map(|w| grads.get(w.id).copied().flatten()).collect())
    }

    /// Vector-Jacobian products of node `id` for each parent, as tape ops.
    fn vjp(&self, op: &Op, id: usize, parents: &[usize], g: usize, want: &[bool]) -> Result<Vec<Option<Var<'_>>>> {
        let var = |id| Var { tape: self, id };
        let g = var(g);
        let out = var(id);
        let x = var(parents[0]);
        let y = parents.get(1).map(|&p| var(p));
        let parent_shape = |k: usize| self.nodes.borrow()[parents[k]].value.shape().to_vec();
        fn one(v: Var<'_>) -> Result<Vec<Option<Var<'_>>>> {
            Ok(vec![Some(v)])
        }
        match op {
            Op::Leaf => Ok(vec![]),
            Op::Matmul => {
                let y = y.expect("binary op");
                let dx = if want[0] { Some(g.matmul(y.transpose()?)?) } else { None };
                let dy = if want[1] { Some(x.transpose()?.matmul(g)?) } else { None };
                Ok(vec![dx, dy])
            }
            Op::Transpose => one(g.transpose()?),
            Op::AddBias => Ok(vec![Some(g), if want[1] { Some(g.sum_rows()?) } else { None }]),
            Op::Add => Ok(vec![Some(g), Some(g)]),
            Op::Sub => Ok(vec![Some(g), Some(g.neg())]),
            Op::Mul => {
                let y = y.expect("binary op");
                Ok(vec![
                    if want[0] { Some(g.mul(y)?) } else { None },
                    if want[1] { Some(g.mul(x)?) } else { None },
                ])
            }
            Op::Div => {
                let y = y.expect("binary op");
                Ok(vec![
                    if want[0] { Some(g.div(y)?) } else { None },
                    if want[1] { Some(g.mul(out)?.div(y)?.neg()) } else { None },
                ])
            }
            Op::Neg => one(g.neg()),
            Op::Scale(c) => one(g.scale(*c)),
            Op::AddScalar(_) => one(g),
            Op::ScaleBy => {
                let s = y.expect("binary op");
                let ds = if want[1] {
                    Some(g.mul(x)?.sum().reshape(parent_shape(1))?)
                } else {
                    None
                };
                Ok(vec![if want[0] { Some(g.scale_by(s)?) } else { None }, ds])
            }
            Op::Square => one(g.mul(x)?.scale(2.0)),
            Op::Sqrt => one(g.div(out)?.scale(0.5)),
            Op::Exp => one(g.mul(out)?),
            Op::Log => one(g.div(x)?),
            Op::Sin => one(g.mul(x.cos())?),
            Op::Cos => one(g.mul(x.sin())?.neg()),
            Op::Tanh => one(g.mul(out.square().neg().add_scalar(1.0))?),
            Op::Sigmoid => one(g.mul(out)?.mul(out.neg().add_scalar(1.0))?),
            Op::Softplus => one(g.mul(x.sigmoid())?),
            Op::LeakyRelu(slope) => {
                // Piecewise linear: the mask is constant, so second-order
                // terms vanish except through `g`.
                let mask = x.value().map(|v| if v > 0.0 { 1.0 } else { *slope });
                one(g.mul(self.constant(mask))?)
            }
            Op::SumAll => one(g.broadcast_scalar(&parent_shape(0))?),
            Op::SumRows => one(g.broadcast_rows(parent_shape(0)[0])?),
            Op::SumCols => one(g.broadcast_cols(parent_shape(0)[1])?),
            Op::BroadcastScalar(_) => one(g.sum().reshape(parent_shape(0))?),
            Op::BroadcastRows(_) => one(g.sum_rows()?),
            Op::BroadcastCols(_) => one(g.sum_cols()?),
            Op::Reshape(_) => one(g.reshape(parent_shape(0))?),
        }
    }

    /// Recomputes every non-leaf node from its recorded parents and reports
    /// whether all cached values are reproduced bit-exactly.
    pub fn replay_matches(&self) -> bool {
        let nodes = self.nodes.borrow();
        nodes.iter().enumerate().all(|(i, node)| {
            if node.op == Op::Leaf {
                return true;
            }
            debug_assert!(node.parents.iter().all(|&p| p < i));
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            match forward(&node.op, &inputs) {
                Ok(v) => {
                    v.shape() == node.value.shape()
                        && v.data()
                            .iter()
                            .zip(node.value.data())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                }
                Err(_) => false,
            }
        })
    }

    /// True if every node's parents precede it.
    pub fn is_topologically_ordered(&self) -> bool {
        let nodes = self.nodes.borrow();
        nodes.iter().enumerate().all(|(i, n)| n.parents.iter().all(|&p| p < i))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// A copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn item(&self) -> Result<f64> {
        self.with_value(Tensor::item)
    }

    fn unary(self, op: Op) -> Var<'t> {
        self.tape.push_ok(op, &[self.id])
    }

    fn binary(self, op: Op, other: Var<'t>) -> Result<Var<'t>> {
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(Error::Usage("operands live on different tapes".into()));
        }
        self.tape.push(op, &[self.id, other.id])
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Matmul, rhs)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.tape.push(Op::Transpose, &[self.id])
    }

    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::AddBias, bias)
    }

    /// `x · W + b` for `x: [B, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.matmul(weight)?.add_bias(bias)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Div, other)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(c))
    }

    /// Multiplies every element by a one-element node.
    pub fn scale_by(self, factor: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::ScaleBy, factor)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.tape.push(Op::Sqrt, &[self.id])
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.tape.push(Op::Log, &[self.id])
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid)
    }

    /// `log(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu(slope))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::LeakyRelu(0.0))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        self.unary(Op::SumAll)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(Tensor::numel) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column sums of a matrix: `[B, n] -> [n]`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        self.tape.push(Op::SumRows, &[self.id])
    }

    /// Row sums of a matrix: `[B, n] -> [B]`.
    pub fn sum_cols(self) -> Result<Var<'t>> {
        self.tape.push(Op::SumCols, &[self.id])
    }

    pub fn broadcast_scalar(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.push(Op::BroadcastScalar(shape.to_vec()), &[self.id])
    }

    pub fn broadcast_rows(self, rows: usize) -> Result<Var<'t>> {
        self.tape.push(Op::BroadcastRows(rows), &[self.id])
    }

    pub fn broadcast_cols(self, cols: usize) -> Result<Var<'t>> {
        self.tape.push(Op::BroadcastCols(cols), &[self.id])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        self.tape.push(Op::Reshape(shape), &[self.id])
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(self) -> Result<Var<'t>> {
        self.square().sum().sqrt()
    }
}

/// Compares tape gradients of a scalar function against central finite
/// differences at `point`.
///
/// Returns `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖)` over all
/// coordinates (0 when both vanish), or infinity when either side is not
/// finite or the function fails.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64) -> f64
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let eval = |p: &Tensor| -> Option<f64> {
        let tape = Tape::new();
        let x = tape.constant(p.clone());
        f(x).ok()?.item().ok()
    };
    let analytic = {
        let tape = Tape::new();
        let x = tape.var(point.clone());
        match f(x).and_then(|y| tape.backward(y, &[x])) {
            Ok(mut g) => g.remove(0),
            Err(_) => return f64::INFINITY,
        }
    };
    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let (Some(fp), Some(fm)) = (eval(&plus), eval(&minus)) else {
            return f64::INFINITY;
        };
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        diff2 += (a - numeric) * (a - numeric);
        a2 += a * a;
        n2 += numeric * numeric;
    }
    let scale = a2.max(n2).sqrt();
    let err = if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale };
    if err.is_finite() {
        err
    } else {
        f64::INFINITY
    }
}
