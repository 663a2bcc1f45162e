//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation as a node whose inputs are earlier
//! nodes, so the node list is already in topological order. [`Tape::backward`]
//! walks it once in reverse, accumulating gradients additively at fan-out.
//!
//! Leaves are either differentiable ([`Tape::leaf`]) or constant
//! ([`Tape::constant`]). Nodes that cannot reach a differentiable leaf are
//! skipped during the backward pass.

mod kernels;

pub(crate) use kernels::sigmoid;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for reporting and for fault injection in the
/// gradient-check negative control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    AddScalar,
    Tanh,
    Sigmoid,
    Sum,
    Mean,
    SoftmaxCrossEntropy,
    GatherRows,
    ConcatRows,
    Reshape,
    Conv2d,
    AvgPool2,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddBias,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SoftmaxCrossEntropy,
        OpKind::GatherRows,
        OpKind::ConcatRows,
        OpKind::Reshape,
        OpKind::Conv2d,
        OpKind::AvgPool2,
    ];

    /// Lower-case name, e.g. `"matmul"`.
    pub fn name(self) -> String {
        format!("{self:?}").to_lowercase()
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.to_lowercase().replace(['_', '-'], "");
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Var, Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    AvgPool2(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxCrossEntropy,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AvgPool2(..) => OpKind::AvgPool2,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Ordered record of operations. One tape per thread; tapes are cheap.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor; zeros when `v` was unreachable.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes the backward rule of `kind` deliberately wrong. Only meant for
    /// negative controls of the gradient checker.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Elementwise binary op. Shapes must match, or one side must hold a
    /// single element (scalar broadcast).
    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.len() == 1 {
            let y = vb.data()[0];
            va.map(|x| f(x, y))
        } else if va.len() == 1 {
            let x = va.data()[0];
            vb.map(|y| f(x, y))
        } else {
            return Err(Error::dim("elementwise", va.shape(), vb.shape()));
        };
        let rg = self.rg(&[a, b]);
        let node = match op {
            BinaryOp::Add => Op::Add(a, b),
            BinaryOp::Sub => Op::Sub(a, b),
            BinaryOp::Mul => Op::Mul(a, b),
        };
        Ok(self.push(value, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    /// Adds a length-`c` bias to every row of an `r × c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.shape(bias) != [c] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for (d, bj) in data[i * c..(i + 1) * c].iter_mut().zip(b) {
                *d += bj;
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// `x · w (+ b)` for a row-batch `x` and an `in × out` weight.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// `1 - x`, used by GRU gating.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[batch × classes]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(Error::dim("softmax_cross_entropy", &[b, c], &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                what: "class",
                index: t,
                bound: c,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &z[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (p, &zi) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (zi - m).exp();
                s += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= s;
            }
            loss += s.ln() + m - row[targets[i]];
        }
        let value = Tensor::scalar(loss / b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Selects rows of a 2-d tensor; repeated indices are allowed and their
    /// gradients add up. Embedding lookup is this op on the table.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(src).dims2()?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index {
                    what: "row",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(self.value(src).row(i));
        }
        let value = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.rg(&[src]);
        Ok(self.push(value, Op::GatherRows { src, idx: idx.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ca != cb {
            return Err(Error::dim("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ra + rb, ca], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::ConcatRows(a, b), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Same-padded stride-1 convolution: `input[N,C,H,W]`, `weight[O,C,K,K]`
    /// (odd `K`), `bias[O]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (is, ws) = (self.shape(input), self.shape(weight));
        let geom = match (is, ws) {
            ([n, c, h, w], [o, c2, k, k2]) if c == c2 && k == k2 && k % 2 == 1 => ConvGeom {
                batch: *n,
                in_ch: *c,
                out_ch: *o,
                height: *h,
                width: *w,
                kernel: *k,
            },
            _ => return Err(Error::dim("conv2d", is, ws)),
        };
        if self.shape(bias) != [geom.out_ch] {
            return Err(Error::dim("conv2d bias", ws, self.shape(bias)));
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![geom.batch, geom.out_ch, geom.height, geom.width], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// 2×2 stride-2 average pooling over the last two axes (even extents).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || !s[s.len() - 1].is_multiple_of(2) || !s[s.len() - 2].is_multiple_of(2) {
            return Err(Error::dim("avg_pool2", &s, &[2, 2]));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes: usize = s[..s.len() - 2].iter().product();
        let out = kernels::avgpool2_forward(self.value(x).data(), planes, h, w);
        let mut shape = s.clone();
        let n = shape.len();
        shape[n - 2] = h / 2;
        shape[n - 1] = w / 2;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::AvgPool2(x), rg))
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x *= 1.5);
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    /// Accumulates `g` into `v`, summing when `v` was scalar-broadcast.
    fn acc_elementwise(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: impl Iterator<Item = f64>) {
        if let Some(slot) = self.slot(grads, v) {
            if slot.len() == 1 {
                slot[0] += g.sum::<f64>();
            } else {
                for (s, x) in slot.iter_mut().zip(g) {
                    *s += x;
                }
            }
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        // Broadcast-aware element access: scalars repeat.
        let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("matmul lhs");
                let n = out.shape()[1];
                let (ad, bd) = (val(*a), val(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(g, bd, ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(ad, g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                self.acc_elementwise(grads, *a, g.iter().copied());
                self.acc_elementwise(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc_elementwise(grads, *a, g.iter().copied());
                self.acc_elementwise(grads, *b, g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                self.acc_elementwise(grads, *a, g.iter().enumerate().map(|(i, x)| x * at(bd, i)));
                self.acc_elementwise(grads, *b, g.iter().enumerate().map(|(i, x)| x * at(ad, i)));
            }
            Op::AddBias(x, b) => {
                self.acc_elementwise(grads, *x, g.iter().copied());
                let c = out.shape()[1];
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks(c) {
                        for (s, x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                }
            }
            Op::Scale(x, s) => self.acc_elementwise(grads, *x, g.iter().map(|v| v * s)),
            Op::AddScalar(x) => self.acc_elementwise(grads, *x, g.iter().copied()),
            Op::Tanh(x) => {
                let y = out.data();
                self.acc_elementwise(grads, *x, g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)));
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.acc_elementwise(grads, *x, g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)));
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                self.acc_elementwise(grads, *x, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                self.acc_elementwise(grads, *x, std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let b = targets.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let c = out.shape()[1];
                if let Some(gs) = self.slot(grads, *src) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (s, x) in gs[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *s += x;
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].value.len();
                self.acc_elementwise(grads, *a, g[..na].iter().copied());
                self.acc_elementwise(grads, *b, g[na..].iter().copied());
            }
            Op::Reshape(x) => self.acc_elementwise(grads, *x, g.iter().copied()),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (id, wd) = (val(*input), val(*weight));
                let mut di = self.slot(grads, *input).map(std::mem::take);
                let mut dw = self.slot(grads, *weight).map(std::mem::take);
                let mut db = self.slot(grads, *bias).map(std::mem::take);
                kernels::conv2d_backward(geom, id, wd, g, di.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                for (v, d) in [(*input, di), (*weight, dw), (*bias, db)] {
                    if let Some(d) = d {
                        grads[v.0] = Some(d);
                    }
                }
            }
            Op::AvgPool2(x) => {
                let s = self.nodes[x.0].value.shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes: usize = s[..s.len() - 2].iter().product();
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::avgpool2_backward(g, gx, planes, h, w);
                }
            }
        }
    }
}
