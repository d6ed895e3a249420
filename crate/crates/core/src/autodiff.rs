//! Reverse-mode differentiation over a single-writer tape.
//!
//! Every [`Var`] op evaluates eagerly and, when the tape is recording,
//! appends a node holding the op kind, its input handles and whatever the
//! backward rule needs. Nodes are appended in evaluation order, so the tape
//! is topologically sorted by construction and [`Tape::backward`] simply
//! walks it in reverse.
//!
//! A tape built with [`Tape::inference`] records nothing; the same model code
//! then runs as a plain forward pass.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec};
use crate::tensor::Tensor;

pub type NodeId = usize;

const UNTRACKED: NodeId = usize::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    Conv(NodeId, NodeId, ConvSpec),
    MaxPool(NodeId, Vec<usize>),
    Concat(NodeId, NodeId, usize),
    Slice(NodeId, usize, usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    ChannelBias(NodeId, NodeId),
    Kl(NodeId, NodeId, usize),
    NegSqDist(NodeId, NodeId),
    Mask(NodeId, Arc<Vec<bool>>),
    Upsample(NodeId, usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape for a forward/backward pass.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that only evaluates; `backward` on it is a contract error.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input. Gradients are accumulated for every node, so
    /// parameters and constants are both leaves.
    pub fn leaf(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.push(value.into(), Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value)
    }

    fn push(&self, value: Arc<Tensor>, op: Op) -> Var<'_> {
        if !self.recording {
            return Var {
                tape: self,
                id: UNTRACKED,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Arc::clone(&value),
            op,
        });
        Var {
            tape: self,
            id,
            value,
        }
    }

    /// Accumulates d(loss)/d(node) for every node up to `loss`.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if !self.recording || loss.id == UNTRACKED {
            return Err(Error::contract("backward on a non-recording tape"));
        }
        if loss.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(loss.value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: NodeId| -> &Tensor { &nodes[i].value };
            let mut send = |i: NodeId, t: Tensor| accumulate(&mut grads, i, t);
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (da, db) = ops::matmul_backward(val(*a), val(*b), &g);
                    send(*a, da);
                    send(*b, db);
                }
                Op::Transpose(a) => send(*a, ops::transpose(&g)?),
                Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?),
                Op::Softmax(a, axis) => send(*a, ops::softmax_backward(&node.value, &g, *axis)),
                Op::LogSoftmax(a, axis) => {
                    send(*a, ops::log_softmax_backward(&node.value, &g, *axis))
                }
                Op::Conv(x, w, spec) => {
                    let (dx, dw) = ops::conv_backward(val(*x), val(*w), &g, *spec);
                    send(*x, dx);
                    send(*w, dw);
                }
                Op::MaxPool(x, argmax) => {
                    let mut dx = Tensor::zeros(val(*x).shape());
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx.data_mut()[src] += gv;
                    }
                    send(*x, dx);
                }
                Op::Concat(a, b, axis) => {
                    let na = val(*a).shape()[*axis];
                    let nb = val(*b).shape()[*axis];
                    send(*a, ops::slice(&g, *axis, 0, na)?);
                    send(*b, ops::slice(&g, *axis, na, nb)?);
                }
                Op::Slice(a, axis, start) => {
                    send(*a, ops::slice_backward(val(*a).shape(), *axis, *start, &g))
                }
                Op::Add(a, b) => {
                    send(*a, reduce_to(&g, val(*a)));
                    send(*b, reduce_to(&g, val(*b)));
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to(&g, val(*a)));
                    send(*b, reduce_to(&g, val(*b)).map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    send(*a, reduce_to(&zip_broadcast(&g, vb, |x, y| x * y), va));
                    send(*b, reduce_to(&zip_broadcast(&g, va, |x, y| x * y), vb));
                }
                Op::Scale(a, s) => send(*a, g.map(|v| v * s)),
                Op::AddScalar(a) => send(*a, g.clone()),
                Op::Relu(a) => {
                    let x = val(*a);
                    send(*a, zip_same(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
                }
                Op::Log(a) => send(*a, zip_same(&g, val(*a), |gv, xv| gv / xv)),
                Op::Neg(a) => send(*a, g.map(|v| -v)),
                Op::Exp(a) => send(*a, zip_same(&g, &node.value, |gv, y| gv * y)),
                Op::Sum(a) => {
                    let gv = g.item()?;
                    send(*a, Tensor::full(val(*a).shape(), gv));
                }
                Op::ChannelBias(x, b) => {
                    let c = val(*b).len();
                    let per = g.len() / c;
                    let db: Vec<f64> = (0..c)
                        .map(|ch| g.data()[ch * per..(ch + 1) * per].iter().sum())
                        .collect();
                    send(*x, g.clone());
                    send(*b, Tensor::new(val(*b).shape().to_vec(), db)?);
                }
                Op::Kl(p, q, axis) => {
                    let (dp, dq) = ops::kl_divergence_backward(val(*p), val(*q), *axis, g.item()?);
                    send(*p, dp);
                    send(*q, dq);
                }
                Op::NegSqDist(m, q) => {
                    let (dm, dq) = ops::neg_sq_dist_backward(val(*m), val(*q), &g);
                    send(*m, dm);
                    send(*q, dq);
                }
                Op::Mask(a, keep) => {
                    let mut d = g.clone();
                    for (v, &k) in d.data_mut().iter_mut().zip(keep.iter()) {
                        if !k {
                            *v = 0.0;
                        }
                    }
                    send(*a, d);
                }
                Op::Upsample(a, factor) => {
                    send(*a, ops::upsample_nearest_backward(val(*a).shape(), *factor, &g))
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, t: Tensor) {
    if id == UNTRACKED {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Elementwise combination where either side may be a single value.
fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.len() == b.len() {
        let shape = if a.rank() >= b.rank() { a.shape() } else { b.shape() };
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(shape.to_vec(), data).expect("same length")
    } else if b.len() == 1 {
        let y = b.data()[0];
        a.map(|x| f(x, y))
    } else {
        let x = a.data()[0];
        b.map(|y| f(x, y))
    }
}

/// Sums a gradient down to the shape of a (possibly broadcast) operand.
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    if g.len() == target.len() {
        g.reshape(target.shape()).expect("same length")
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() == b.shape() || a.len() == 1 || b.len() == 1 {
        Ok(())
    } else {
        Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} are not scalar-broadcastable",
            a.shape(),
            b.shape()
        )))
    }
}

/// Gradients from one backward pass, indexed by the vars of that tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The gradient reaching `var`, or `None` when no path leads to it.
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros when there is no path.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }
}

/// A value on a tape.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
    value: Arc<Tensor>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared_value(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(Arc::new(value), op)
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push(Arc::clone(&self.value), Op::Leaf)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = ops::matmul(&self.value, &other.value)?;
        Ok(self.unary(v, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = ops::transpose(&self.value)?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value.reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let v = ops::softmax(&self.value, axis)?;
        Ok(self.unary(v, Op::Softmax(self.id, axis)))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let v = ops::log_softmax(&self.value, axis)?;
        Ok(self.unary(v, Op::LogSoftmax(self.id, axis)))
    }

    pub fn conv(&self, weight: &Var<'t>, spec: ConvSpec) -> Result<Var<'t>> {
        let v = ops::conv(&self.value, &weight.value, spec)?;
        Ok(self.unary(v, Op::Conv(self.id, weight.id, spec)))
    }

    pub fn maxpool2d(&self, kernel: usize, stride: usize) -> Result<Var<'t>> {
        let (v, argmax) = ops::maxpool2d(&self.value, kernel, stride)?;
        let argmax = if self.tape.recording { argmax } else { Vec::new() };
        Ok(self.unary(v, Op::MaxPool(self.id, argmax)))
    }

    pub fn concat(&self, other: &Var<'t>, axis: usize) -> Result<Var<'t>> {
        let v = ops::concat(&self.value, &other.value, axis)?;
        Ok(self.unary(v, Op::Concat(self.id, other.id, axis)))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = ops::slice(&self.value, axis, start, len)?;
        Ok(self.unary(v, Op::Slice(self.id, axis, start)))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        broadcast_shape(&self.value, &other.value, "add")?;
        let v = zip_broadcast(&self.value, &other.value, |a, b| a + b);
        Ok(self.unary(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        broadcast_shape(&self.value, &other.value, "sub")?;
        let v = zip_broadcast(&self.value, &other.value, |a, b| a - b);
        Ok(self.unary(v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        broadcast_shape(&self.value, &other.value, "mul")?;
        let v = zip_broadcast(&self.value, &other.value, |a, b| a * b);
        Ok(self.unary(v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let v = self.value.map(|x| x * factor);
        self.unary(v, Op::Scale(self.id, factor))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value.map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&self) -> Var<'t> {
        let v = self.value.map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if self.value.data().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::domain("log of a non-positive value"));
        }
        let v = self.value.map(f64::ln);
        Ok(self.unary(v, Op::Log(self.id)))
    }

    pub fn neg(&self) -> Var<'t> {
        let v = self.value.map(|x| -x);
        self.unary(v, Op::Neg(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value.map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    /// Sum of all entries as a rank-0 value.
    pub fn sum(&self) -> Var<'t> {
        self.unary(Tensor::scalar(self.value.sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Adds `bias[c]` to every entry of channel `c` (the leading axis).
    pub fn add_channel_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let c = self.value.shape()[0];
        if bias.value.len() != c {
            return Err(Error::dim(format!(
                "bias of {} entries for {c} channels",
                bias.value.len()
            )));
        }
        let per = self.value.len() / c;
        let mut v = (*self.value).clone();
        for (ch, &b) in bias.value.data().iter().enumerate() {
            for x in &mut v.data_mut()[ch * per..(ch + 1) * per] {
                *x += b;
            }
        }
        Ok(self.unary(v, Op::ChannelBias(self.id, bias.id)))
    }

    /// `KL(self ‖ q)` along `axis`, averaged over the remaining positions.
    pub fn kl_divergence(&self, q: &Var<'t>, axis: usize) -> Result<Var<'t>> {
        let v = ops::kl_divergence(&self.value, &q.value, axis)?;
        Ok(self.unary(Tensor::scalar(v), Op::Kl(self.id, q.id, axis)))
    }

    /// Negative squared Euclidean distance between the columns of `self`
    /// and the columns of `query`.
    pub fn neg_sq_dist(&self, query: &Var<'t>) -> Result<Var<'t>> {
        let v = ops::neg_sq_dist(&self.value, &query.value)?;
        Ok(self.unary(v, Op::NegSqDist(self.id, query.id)))
    }

    /// Replaces entries whose `keep` flag is false with `-inf`.
    pub fn mask_neg_inf(&self, keep: Arc<Vec<bool>>) -> Result<Var<'t>> {
        if keep.len() != self.value.len() {
            return Err(Error::dim("mask length differs from tensor length"));
        }
        let mut v = (*self.value).clone();
        for (x, &k) in v.data_mut().iter_mut().zip(keep.iter()) {
            if !k {
                *x = f64::NEG_INFINITY;
            }
        }
        Ok(self.unary(v, Op::Mask(self.id, keep)))
    }

    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<'t>> {
        let v = ops::upsample_nearest(&self.value, factor)?;
        Ok(self.unary(v, Op::Upsample(self.id, factor)))
    }
}
