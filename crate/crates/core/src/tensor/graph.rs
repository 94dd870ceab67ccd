use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use super::kernels::{self, split_axis, zip_broadcast};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, ChaCha8Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// Operation record. Parent ids always point at earlier nodes.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Softmax(usize, usize),
    SumAll(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    StdAxis(usize, usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Tensor, inv_std: Vec<f64> },
    Standardize { x: usize, inv_std: Vec<f64> },
    Dropout(usize, Vec<f64>),
    Concat { parts: Vec<usize>, axis: usize },
    Select { x: usize, axis: usize, index: Vec<usize> },
    Squash(usize),
    Blend { alpha: usize, a: usize, b: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<f64>, probs: Tensor },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A differentiation tape.
///
/// In [`Mode::Training`] every operation appends a node carrying its parents;
/// [`Graph::backward`] walks the tape once in reverse. In [`Mode::Inference`]
/// values are still stored but no operation or parent is recorded and dropout
/// is the identity.
///
/// A graph is single-threaded (`!Sync`); build one per thread.
pub struct Graph {
    mode: Mode,
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    dropout_rng: RefCell<ChaCha8Rng>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self::with_seed(mode, 0)
    }

    /// Dropout masks come from the seed's dropout stream.
    pub fn with_seed(mode: Mode, seed: u64) -> Self {
        Graph {
            mode,
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            dropout_rng: RefCell::new(rng::stream(seed, rng::DROPOUT_STREAM)),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        self.push_rc(Rc::new(value), op, parents)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, parents: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.mode == Mode::Training && parents.iter().any(|&p| nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push_leaf(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.mode == Mode::Training,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that receives no gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_leaf(Rc::new(t), false)
    }

    pub fn constant_shared(&self, t: Rc<Tensor>) -> Var<'_> {
        self.push_leaf(t, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push_leaf(Rc::new(t), true)
    }

    /// A differentiable leaf sharing storage with a parameter store.
    pub fn param(&self, t: Rc<Tensor>) -> Var<'_> {
        self.push_leaf(t, true)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(v.id).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if self.mode != Mode::Training {
            return Err(Error::Usage("backward on an inference-mode graph".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads = self.grads.borrow_mut();
        grads.resize(nodes.len(), None);
        // per-sweep gradients; only leaves keep theirs in `grads`
        let mut local: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        local[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                accumulate(&mut grads[id], g);
                continue;
            }
            for (pid, pg) in backward_op(&nodes, id, &g)? {
                if nodes[pid].requires_grad {
                    accumulate(&mut local[pid], pg);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn backward_op(nodes: &[Node], id: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let node = &nodes[id];
    let y = &*node.value;
    let val = |p: usize| &*nodes[p].value;
    let out = match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, kernels::sum_to_shape(g, val(*a).shape())),
            (*b, kernels::sum_to_shape(g, val(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, kernels::sum_to_shape(g, val(*a).shape())),
            (*b, kernels::sum_to_shape(&g.map(|x| -x), val(*b).shape())),
        ],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let mut v = Vec::new();
            if nodes[*a].requires_grad {
                let ga = zip_broadcast(g, vb, g.shape(), |x, y| x * y);
                v.push((*a, kernels::sum_to_shape(&ga, va.shape())));
            }
            if nodes[*b].requires_grad {
                let gb = zip_broadcast(g, va, g.shape(), |x, y| x * y);
                v.push((*b, kernels::sum_to_shape(&gb, vb.shape())));
            }
            v
        }
        Op::Blend { alpha, a, b } => {
            let (al, va, vb) = (val(*alpha), val(*a), val(*b));
            let mut v = Vec::new();
            if nodes[*alpha].requires_grad {
                let d = g.data().iter().zip(va.data()).zip(vb.data()).map(|((g, x), y)| g * (x - y)).collect();
                v.push((*alpha, Tensor::new(g.shape().to_vec(), d)?));
            }
            if nodes[*a].requires_grad {
                v.push((*a, zip_broadcast(g, al, g.shape(), |g, w| g * w)));
            }
            if nodes[*b].requires_grad {
                v.push((*b, zip_broadcast(g, al, g.shape(), |g, w| g * (1.0 - w))));
            }
            v
        }
        Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Tanh(a) => vec![(*a, zip_broadcast(g, y, g.shape(), |g, y| g * (1.0 - y * y)))],
        Op::Sigmoid(a) => vec![(*a, zip_broadcast(g, y, g.shape(), |g, y| g * y * (1.0 - y)))],
        Op::Relu(a) => vec![(
            *a,
            zip_broadcast(g, val(*a), g.shape(), |g, x| if x > 0.0 { g } else { 0.0 }),
        )],
        Op::Exp(a) => vec![(*a, zip_broadcast(g, y, g.shape(), |g, y| g * y))],
        Op::MatMul { a, b, ta, tb } => {
            let (va, vb) = (val(*a), val(*b));
            let mut v = Vec::new();
            if nodes[*a].requires_grad {
                let ga = if !ta {
                    kernels::matmul(g, false, vb, !tb)?
                } else {
                    kernels::matmul(vb, *tb, g, true)?
                };
                v.push((*a, reduce_to(ga, va.shape())));
            }
            if nodes[*b].requires_grad {
                let gb = if vb.rank() == 2 && va.rank() > 2 {
                    let mut acc = Tensor::zeros(vb.shape());
                    if !tb {
                        kernels::gemm_batched(va, !ta, g, false, &mut acc, 0.0);
                    } else {
                        kernels::gemm_batched(g, true, va, *ta, &mut acc, 0.0);
                    }
                    acc
                } else if !tb {
                    kernels::matmul(va, !ta, g, false)?
                } else {
                    kernels::matmul(g, true, va, *ta)?
                };
                v.push((*b, reduce_to(gb, vb.shape())));
            }
            v
        }
        Op::Reshape(a) => vec![(*a, Tensor::new(val(*a).shape().to_vec(), g.data.clone())?)],
        Op::Permute(a, axes) => {
            let mut inv = vec![0; axes.len()];
            for (k, &ax) in axes.iter().enumerate() {
                inv[ax] = k;
            }
            vec![(*a, g.permute(&inv)?)]
        }
        Op::Softmax(a, axis) => {
            let (outer, n, inner) = split_axis(y.shape(), *axis)?;
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| g.data[at(k)] * y.data[at(k)]).sum();
                    for k in 0..n {
                        gx[at(k)] = y.data[at(k)] * (g.data[at(k)] - dot);
                    }
                }
            }
            vec![(*a, Tensor::new(y.shape().to_vec(), gx)?)]
        }
        Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data[0]))],
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let x = val(*a);
            let (outer, n, inner) = split_axis(x.shape(), *axis)?;
            let scale = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / n as f64 } else { 1.0 };
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        gx[(o * n + k) * inner + i] = g.data[o * inner + i] * scale;
                    }
                }
            }
            vec![(*a, Tensor::new(x.shape().to_vec(), gx)?)]
        }
        Op::StdAxis(a, axis) => {
            // d sigma / d x_k = (x_k - mu) / (n sigma); zero where sigma = 0
            let x = val(*a);
            let (outer, n, inner) = split_axis(x.shape(), *axis)?;
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let mu = (0..n).map(|k| x.data[at(k)]).sum::<f64>() / n as f64;
                    let s = y.data[o * inner + i];
                    if s > 0.0 {
                        for k in 0..n {
                            gx[at(k)] = g.data[o * inner + i] * (x.data[at(k)] - mu) / (n as f64 * s);
                        }
                    }
                }
            }
            vec![(*a, Tensor::new(x.shape().to_vec(), gx)?)]
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let d = *xhat.shape().last().unwrap();
            let rows = xhat.len() / d;
            let gamma = val(*gain);
            let mut gx = vec![0.0; xhat.len()];
            let mut ggain = vec![0.0; d];
            let mut gbias = vec![0.0; d];
            for r in 0..rows {
                let gr = &g.data[r * d..(r + 1) * d];
                let hr = &xhat.data[r * d..(r + 1) * d];
                let mut mean_dh = 0.0;
                let mut mean_dh_h = 0.0;
                for k in 0..d {
                    let dh = gr[k] * gamma.data[k];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[k];
                    ggain[k] += gr[k] * hr[k];
                    gbias[k] += gr[k];
                }
                mean_dh /= d as f64;
                mean_dh_h /= d as f64;
                for k in 0..d {
                    let dh = gr[k] * gamma.data[k];
                    gx[r * d + k] = inv_std[r] * (dh - mean_dh - hr[k] * mean_dh_h);
                }
            }
            vec![
                (*x, Tensor::new(xhat.shape().to_vec(), gx)?),
                (*gain, Tensor::from_vec(ggain)),
                (*bias, Tensor::from_vec(gbias)),
            ]
        }
        Op::Standardize { x, inv_std } => {
            let d = *y.shape().last().unwrap();
            let rows = y.len() / d;
            let mut gx = vec![0.0; y.len()];
            for r in 0..rows {
                if inv_std[r] == 0.0 {
                    continue;
                }
                let gr = &g.data[r * d..(r + 1) * d];
                let zr = &y.data[r * d..(r + 1) * d];
                let mean_g = gr.iter().sum::<f64>() / d as f64;
                let mean_gz = gr.iter().zip(zr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for k in 0..d {
                    gx[r * d + k] = inv_std[r] * (gr[k] - mean_g - zr[k] * mean_gz);
                }
            }
            vec![(*x, Tensor::new(y.shape().to_vec(), gx)?)]
        }
        Op::Dropout(a, mask) => vec![(
            *a,
            Tensor::new(
                g.shape().to_vec(),
                g.data.iter().zip(mask).map(|(g, m)| g * m).collect(),
            )?,
        )],
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split_axis(y.shape(), *axis)?;
            let total = y.shape()[*axis];
            let mut v = Vec::new();
            let mut start = 0;
            for &p in parts {
                let shape = val(p).shape().to_vec();
                let n = shape[*axis];
                let mut gp = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    gp.extend_from_slice(&g.data[base..base + n * inner]);
                }
                v.push((p, Tensor::new(shape, gp)?));
                start += n;
            }
            v
        }
        Op::Select { x, axis, index } => {
            let xs = val(*x).shape().to_vec();
            let (outer, n, inner) = split_axis(&xs, *axis)?;
            let mut gx = vec![0.0; xs.iter().product()];
            let m = index.len();
            for o in 0..outer {
                for (k, &src) in index.iter().enumerate() {
                    for i in 0..inner {
                        gx[(o * n + src) * inner + i] += g.data[(o * m + k) * inner + i];
                    }
                }
            }
            vec![(*x, Tensor::new(xs, gx)?)]
        }
        Op::Squash(a) => {
            // y = s * f(n), n = |s|^2, f(n) = sqrt(n) / (1 + n)
            let s = val(*a);
            let d = *s.shape().last().unwrap();
            let mut gx = vec![0.0; s.len()];
            for r in 0..s.len() / d {
                let sr = &s.data[r * d..(r + 1) * d];
                let gr = &g.data[r * d..(r + 1) * d];
                let n: f64 = sr.iter().map(|x| x * x).sum();
                if n == 0.0 {
                    continue;
                }
                let f = n.sqrt() / (1.0 + n);
                let coef = (1.0 - n) / (n.sqrt() * (1.0 + n) * (1.0 + n));
                let sg: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for k in 0..d {
                    gx[r * d + k] = f * gr[k] + coef * sg * sr[k];
                }
            }
            vec![(*a, Tensor::new(s.shape().to_vec(), gx)?)]
        }
        Op::CrossEntropy { logits, targets, weights, probs } => {
            let v = *probs.shape().last().unwrap();
            let mut gx = probs.data.clone();
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                let row = &mut gx[r * v..(r + 1) * v];
                row[t] -= 1.0;
                row.iter_mut().for_each(|x| *x *= w * g.data[0]);
            }
            vec![(*logits, Tensor::new(probs.shape().to_vec(), gx)?)]
        }
    };
    Ok(out)
}

fn reduce_to(t: Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        t
    } else {
        kernels::sum_to_shape(&t, shape)
    }
}

/// Population standardization of each row of the trailing axis. Returns the
/// standardized values and `1/sigma` per row, with rows whose spread is below
/// `eps` mapped to zero.
fn standardize_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let d = *x.shape().last().unwrap();
    let rows = x.len() / d;
    let mut z = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x.data[r * d..(r + 1) * d];
        let mu = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let sd = var.sqrt();
        if sd > eps {
            inv[r] = 1.0 / sd;
            for k in 0..d {
                z[r * d + k] = (xr[k] - mu) / sd;
            }
        }
    }
    (Tensor { shape: x.shape.clone(), data: z }, inv)
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    fn same_graph(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let shape = kernels::broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| Error::dim(name, a.shape(), b.shape()))?;
        let out = zip_broadcast(&a, &b, &shape, f);
        Ok(self.graph.push(out, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// `alpha * a + (1 - alpha) * b` elementwise, for three tensors of one
    /// shape. Where `a` and `b` agree the result is that value exactly.
    pub fn blend(alpha: Var<'g>, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        let (al, va, vb) = (alpha.value(), a.value(), b.value());
        if va.shape() != vb.shape() {
            return Err(Error::dim("blend", va.shape(), vb.shape()));
        }
        if al.shape() != va.shape() {
            return Err(Error::dim("blend weights", al.shape(), va.shape()));
        }
        let data = al
            .data()
            .iter()
            .zip(va.data())
            .zip(vb.data())
            .map(|((&w, &x), &y)| if x == y { x } else { w * x + (1.0 - w) * y })
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(alpha.graph.push(out, Op::Blend { alpha: alpha.id, a: a.id, b: b.id }, &[alpha.id, a.id, b.id]))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let out = self.value().map(|x| x * c);
        self.graph.push(out, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let out = self.value().map(|x| x + c);
        self.graph.push(out, Op::AddScalar(self.id), &[self.id])
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'g> {
        self.neg().add_scalar(1.0)
    }

    pub fn tanh(self) -> Var<'g> {
        let out = self.value().map(f64::tanh);
        self.graph.push(out, Op::Tanh(self.id), &[self.id])
    }

    pub fn sigmoid(self) -> Var<'g> {
        let out = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.graph.push(out, Op::Sigmoid(self.id), &[self.id])
    }

    pub fn relu(self) -> Var<'g> {
        let out = self.value().map(|x| x.max(0.0));
        self.graph.push(out, Op::Relu(self.id), &[self.id])
    }

    pub fn exp(self) -> Var<'g> {
        let out = self.value().map(f64::exp);
        self.graph.push(out, Op::Exp(self.id), &[self.id])
    }

    /// Batched matrix product over the last two axes.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with either operand transposed in place.
    pub fn matmul_t(self, other: Var<'g>, ta: bool, tb: bool) -> Result<Var<'g>> {
        self.same_graph(&other);
        let out = kernels::matmul(&self.value(), ta, &other.value(), tb)?;
        Ok(self.graph.push(
            out,
            Op::MatMul { a: self.id, b: other.id, ta, tb },
            &[self.id, other.id],
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.graph.push(out, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let out = self.value().permute(axes)?;
        Ok(self.graph.push(out, Op::Permute(self.id, axes.to_vec()), &[self.id]))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::dim("transpose", &self.shape(), &[2]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let out = kernels::softmax(&self.value(), axis)?;
        Ok(self.graph.push(out, Op::Softmax(self.id, axis), &[self.id]))
    }

    pub fn sum(self) -> Var<'g> {
        let out = Tensor::scalar(self.value().sum());
        self.graph.push(out, Op::SumAll(self.id), &[self.id])
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'g>> {
        let x = self.value();
        let (outer, n, inner) = split_axis(x.shape(), axis)?;
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += x.data[(o * n + k) * inner + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let op = if mean { Op::MeanAxis(self.id, axis) } else { Op::SumAxis(self.id, axis) };
        Ok(self.graph.push(Tensor::new(shape, out)?, op, &[self.id]))
    }

    /// Sum along `axis`, dropping it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce_axis(axis, false)
    }

    /// Mean along `axis`, dropping it.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce_axis(axis, true)
    }

    /// Population standard deviation along `axis`, dropping it.
    pub fn std_axis(self, axis: usize) -> Result<Var<'g>> {
        let (_, std) = super::stats(&self.value(), axis)?;
        Ok(self.graph.push(std, Op::StdAxis(self.id, axis), &[self.id]))
    }

    /// Normalizes the trailing axis to zero mean and unit variance (population,
    /// `eps` inside the square root), then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| Error::dim("layer_norm", x.shape(), &[1]))?;
        let (gv, bv) = (gain.value(), bias.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::dim("layer_norm", x.shape(), gv.shape()));
        }
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x.data[r * d..(r + 1) * d];
            let mu = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for k in 0..d {
                let h = (xr[k] - mu) * inv;
                xhat[r * d + k] = h;
                out[r * d + k] = h * gv.data[k] + bv.data[k];
            }
        }
        let xhat = Tensor::new(x.shape().to_vec(), xhat)?;
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.graph.push(
            out,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, inv_std },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Population z-score of each trailing-axis row; rows with standard
    /// deviation at or below `eps` become all zeros.
    pub fn standardize(self, eps: f64) -> Var<'g> {
        let (z, inv_std) = standardize_rows(&self.value(), eps);
        self.graph.push(z, Op::Standardize { x: self.id, inv_std }, &[self.id])
    }

    /// Inverted dropout. Identity in inference mode or at rate 0.
    pub fn dropout(self, rate: f64) -> Result<Var<'g>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if self.graph.mode == Mode::Inference || rate == 0.0 {
            return Ok(self);
        }
        let x = self.value();
        let keep = 1.0 / (1.0 - rate);
        let mut rng = self.graph.dropout_rng.borrow_mut();
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        drop(rng);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        Ok(self.graph.push(out, Op::Dropout(self.id, mask), &[self.id]))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let g = first.graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let n = v.shape()[axis];
                data.extend_from_slice(&v.data[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(g.push(Tensor::new(shape, data)?, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    /// Gathers entries along `axis` (`index` may repeat entries).
    pub fn select(self, axis: usize, index: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let (outer, n, inner) = split_axis(x.shape(), axis)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("index {bad} out of range for axis of length {n}")));
        }
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &src in index {
                data.extend_from_slice(&x.data[(o * n + src) * inner..(o * n + src + 1) * inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = index.len();
        Ok(self.graph.push(
            Tensor::new(shape, data)?,
            Op::Select { x: self.id, axis, index: index.to_vec() },
            &[self.id],
        ))
    }

    /// Capsule squashing along the trailing axis:
    /// `s * |s|^2 / (1 + |s|^2) / |s|`, with the zero vector fixed.
    pub fn squash(self) -> Var<'g> {
        let s = self.value();
        let d = *s.shape().last().unwrap();
        let mut out = s.data.clone();
        for r in 0..s.len() / d {
            let row = &mut out[r * d..(r + 1) * d];
            let n: f64 = row.iter().map(|x| x * x).sum();
            let f = if n == 0.0 { 0.0 } else { n.sqrt() / (1.0 + n) };
            row.iter_mut().for_each(|x| *x *= f);
        }
        let out = Tensor { shape: s.shape.clone(), data: out };
        self.graph.push(out, Op::Squash(self.id), &[self.id])
    }

    /// Weighted negative log-likelihood of `targets` under a softmax over the
    /// trailing axis of `self` (`[rows, classes]`): `sum_r w_r * -log p_r(t_r)`.
    pub fn cross_entropy(self, targets: &[usize], weights: &[f64]) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != targets.len() || targets.len() != weights.len() {
            return Err(Error::dim("cross_entropy", x.shape(), &[targets.len(), weights.len()]));
        }
        let v = x.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!("target id {bad} outside vocabulary of {v}")));
        }
        let probs = kernels::softmax(&x, 1)?;
        let mut loss = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w != 0.0 {
                let row = &x.data[r * v..(r + 1) * v];
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
                loss += w * (lse - row[t]);
            }
        }
        Ok(self.graph.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            &[self.id],
        ))
    }
}
