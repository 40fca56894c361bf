//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding
//! its value, its parents and enough op metadata to push gradients back.
//! Calling [`Graph::backward`] walks the tape in reverse and accumulates
//! `d loss / d param` into the [`ParamStore`] gradient buffers.
//!
//! Every forward op validates shapes and rejects non-finite outputs, so a
//! diverging model fails loudly at the op that produced the NaN/Inf.

use crate::error::{KmapError, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    /// Leaf tied to a `ParamStore` entry; backward scatters into its grad.
    Param(usize),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    /// Sum of N same-shape parents.
    AddN,
    Scale(f64),
    /// `W (r x c) * x (c) -> (r)`
    MatVec,
    /// `w (r) * M (r x c) -> (c)`, i.e. a weighted sum of rows.
    VecMat,
    /// `u (r) outer v (c) -> (r x c)`
    Outer,
    /// Each row of `M (r x c)` multiplied elementwise by `v (c)`.
    MulRowBcast,
    /// Tensor multiplied by a scalar node.
    MulBcast,
    /// Tensor divided by a scalar node.
    DivBcast,
    SelectRow(usize),
    Slice {
        start: usize,
        len: usize,
    },
    /// Concatenation of 1-D parents; stores each parent length.
    Concat(Vec<usize>),
    /// Scalars stacked into a vector.
    StackScalars,
    Dot,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    L2Norm,
    Reshape,
    /// Binary cross-entropy of a probability against a constant target.
    Bce(f64),
    /// Numerically stable BCE taking the pre-sigmoid logit.
    BceLogits(f64),
}

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    op: Op,
    needs_grad: bool,
}

/// Recording tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, parents: Vec<NodeId>, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(KmapError::NonFinite { op: op_name });
        }
        let needs_grad = matches!(op, Op::Param(_))
            || parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            parents,
            op,
            needs_grad,
        });
        Ok(id)
    }

    // ---- leaves ------------------------------------------------------

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("constant", value, vec![], Op::Const)
    }

    pub fn scalar(&mut self, value: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(value))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> NodeId {
        self.constant(Tensor::zeros(shape)).expect("zeros are finite")
    }

    /// Leaf node for a named parameter. Each parameter appears at most once
    /// per graph; repeated calls return the cached node so gradients from
    /// every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(&index) {
            return Ok(id);
        }
        let value = store.value(index).clone();
        let id = self.push("param", value, vec![], Op::Param(index))?;
        self.param_nodes.insert(index, id);
        Ok(id)
    }

    // ---- elementwise -------------------------------------------------

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(KmapError::ShapeMismatch {
                op: op_name,
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(op_name, value, vec![a, b], op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("div", a, b, Op::Div, |x, y| x / y)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| -x).collect())?;
        self.push("neg", value, vec![a], Op::Neg)
    }

    /// Sum of any number of same-shape nodes.
    pub fn add_n(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let first = terms
            .first()
            .ok_or_else(|| KmapError::invalid("add_n needs at least one term"))?;
        let shape = self.nodes[first.0].value.shape().to_vec();
        let mut acc = vec![0.0; self.nodes[first.0].value.numel()];
        for t in terms {
            let v = &self.nodes[t.0].value;
            if v.shape() != shape.as_slice() {
                return Err(KmapError::ShapeMismatch {
                    op: "add_n",
                    left: shape,
                    right: v.shape().to_vec(),
                });
            }
            for (a, b) in acc.iter_mut().zip(v.data()) {
                *a += *b;
            }
        }
        self.push("add_n", Tensor::new(shape, acc)?, terms.to_vec(), Op::AddN)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let value = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x * factor).collect(),
        )?;
        self.push("scale", value, vec![a], Op::Scale(factor))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (vw, vx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        if vw.shape().len() != 2 || vx.shape().len() != 1 || vw.cols() != vx.numel() {
            return Err(KmapError::ShapeMismatch {
                op: "matvec",
                left: vw.shape().to_vec(),
                right: vx.shape().to_vec(),
            });
        }
        let (r, c) = (vw.rows(), vw.cols());
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = vw.row(i);
            let mut s = 0.0;
            for j in 0..c {
                s += row[j] * vx.data()[j];
            }
            out[i] = s;
        }
        self.push("matvec", Tensor::vector(out), vec![w, x], Op::MatVec)
    }

    /// Weighted sum of the rows of `m` with weights `w`.
    pub fn vecmat(&mut self, w: NodeId, m: NodeId) -> Result<NodeId> {
        let (vw, vm) = (&self.nodes[w.0].value, &self.nodes[m.0].value);
        if vw.shape().len() != 1 || vm.shape().len() != 2 || vw.numel() != vm.rows() {
            return Err(KmapError::ShapeMismatch {
                op: "vecmat",
                left: vw.shape().to_vec(),
                right: vm.shape().to_vec(),
            });
        }
        let (r, c) = (vm.rows(), vm.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            let wi = vw.data()[i];
            let row = vm.row(i);
            for j in 0..c {
                out[j] += wi * row[j];
            }
        }
        self.push("vecmat", Tensor::vector(out), vec![w, m], Op::VecMat)
    }

    pub fn outer(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        let (vu, vv) = (&self.nodes[u.0].value, &self.nodes[v.0].value);
        if vu.shape().len() != 1 || vv.shape().len() != 1 {
            return Err(KmapError::ShapeMismatch {
                op: "outer",
                left: vu.shape().to_vec(),
                right: vv.shape().to_vec(),
            });
        }
        let (r, c) = (vu.numel(), vv.numel());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = vu.data()[i] * vv.data()[j];
            }
        }
        self.push("outer", Tensor::new(vec![r, c], out)?, vec![u, v], Op::Outer)
    }

    /// Multiply every row of matrix `m` elementwise by vector `v`.
    pub fn mul_row_bcast(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (vm, vv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        if vm.shape().len() != 2 || vv.shape().len() != 1 || vm.cols() != vv.numel() {
            return Err(KmapError::ShapeMismatch {
                op: "mul_row_bcast",
                left: vm.shape().to_vec(),
                right: vv.shape().to_vec(),
            });
        }
        let (r, c) = (vm.rows(), vm.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = vm.at(i, j) * vv.data()[j];
            }
        }
        self.push(
            "mul_row_bcast",
            Tensor::new(vec![r, c], out)?,
            vec![m, v],
            Op::MulRowBcast,
        )
    }

    /// Multiply a tensor by a scalar node.
    pub fn mul_bcast(&mut self, t: NodeId, s: NodeId) -> Result<NodeId> {
        let (vt, vs) = (&self.nodes[t.0].value, &self.nodes[s.0].value);
        if !vs.is_scalar() {
            return Err(KmapError::ShapeMismatch {
                op: "mul_bcast",
                left: vt.shape().to_vec(),
                right: vs.shape().to_vec(),
            });
        }
        let m = vs.item();
        let value = Tensor::new(
            vt.shape().to_vec(),
            vt.data().iter().map(|x| x * m).collect(),
        )?;
        self.push("mul_bcast", value, vec![t, s], Op::MulBcast)
    }

    /// Divide a tensor by a scalar node.
    pub fn div_bcast(&mut self, t: NodeId, s: NodeId) -> Result<NodeId> {
        let (vt, vs) = (&self.nodes[t.0].value, &self.nodes[s.0].value);
        if !vs.is_scalar() {
            return Err(KmapError::ShapeMismatch {
                op: "div_bcast",
                left: vt.shape().to_vec(),
                right: vs.shape().to_vec(),
            });
        }
        let d = vs.item();
        let value = Tensor::new(
            vt.shape().to_vec(),
            vt.data().iter().map(|x| x / d).collect(),
        )?;
        self.push("div_bcast", value, vec![t, s], Op::DivBcast)
    }

    // ---- structure ----------------------------------------------------

    /// Select one row of a matrix; gradient flows only into that row.
    pub fn select_row(&mut self, m: NodeId, row: usize) -> Result<NodeId> {
        let vm = &self.nodes[m.0].value;
        if vm.shape().len() != 2 {
            return Err(KmapError::ShapeMismatch {
                op: "select_row",
                left: vm.shape().to_vec(),
                right: vec![],
            });
        }
        if row >= vm.rows() {
            return Err(KmapError::IndexOutOfRange {
                what: "select_row",
                index: row,
                size: vm.rows(),
            });
        }
        let value = Tensor::vector(vm.row(row).to_vec());
        self.push("select_row", value, vec![m], Op::SelectRow(row))
    }

    pub fn slice(&mut self, v: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vv = &self.nodes[v.0].value;
        if vv.shape().len() != 1 || start + len > vv.numel() {
            return Err(KmapError::IndexOutOfRange {
                what: "slice",
                index: start + len,
                size: vv.numel(),
            });
        }
        let value = Tensor::vector(vv.data()[start..start + len].to_vec());
        self.push("slice", value, vec![v], Op::Slice { start, len })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(KmapError::invalid("concat needs at least one part"));
        }
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape().len() != 1 {
                return Err(KmapError::ShapeMismatch {
                    op: "concat",
                    left: v.shape().to_vec(),
                    right: vec![],
                });
            }
            lens.push(v.numel());
            data.extend_from_slice(v.data());
        }
        self.push(
            "concat",
            Tensor::vector(data),
            parts.to_vec(),
            Op::Concat(lens),
        )
    }

    /// Stack scalar nodes into a vector.
    pub fn stack_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::with_capacity(parts.len());
        for p in parts {
            let v = &self.nodes[p.0].value;
            if !v.is_scalar() {
                return Err(KmapError::ShapeMismatch {
                    op: "stack_scalars",
                    left: v.shape().to_vec(),
                    right: vec![],
                });
            }
            data.push(v.item());
        }
        self.push(
            "stack_scalars",
            Tensor::vector(data),
            parts.to_vec(),
            Op::StackScalars,
        )
    }

    pub fn dot(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        let (vu, vv) = (&self.nodes[u.0].value, &self.nodes[v.0].value);
        if vu.shape() != vv.shape() || vu.shape().len() != 1 {
            return Err(KmapError::ShapeMismatch {
                op: "dot",
                left: vu.shape().to_vec(),
                right: vv.shape().to_vec(),
            });
        }
        let s: f64 = vu
            .data()
            .iter()
            .zip(vv.data().iter())
            .map(|(&x, &y)| x * y)
            .sum();
        self.push("dot", Tensor::scalar(s), vec![u, v], Op::Dot)
    }

    /// View a single-element tensor as a scalar.
    pub fn to_scalar(&mut self, v: NodeId) -> Result<NodeId> {
        let vv = &self.nodes[v.0].value;
        if vv.numel() != 1 {
            return Err(KmapError::ShapeMismatch {
                op: "to_scalar",
                left: vv.shape().to_vec(),
                right: vec![],
            });
        }
        let value = Tensor::scalar(vv.data()[0]);
        self.push("to_scalar", value, vec![v], Op::Reshape)
    }

    // ---- activations ---------------------------------------------------

    fn unary(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())?;
        self.push(op_name, value, vec![a], op)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", a, Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("tanh", a, Op::Tanh, f64::tanh)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, Op::Exp, f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("ln", a, Op::Ln, f64::ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("sqrt", a, Op::Sqrt, f64::sqrt)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.shape().len() != 1 {
            return Err(KmapError::ShapeMismatch {
                op: "softmax",
                left: va.shape().to_vec(),
                right: vec![],
            });
        }
        let max = va.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = va.data().iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let value = Tensor::vector(exps.into_iter().map(|e| e / z).collect());
        self.push("softmax", value, vec![a], Op::Softmax)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.shape().len() != 1 {
            return Err(KmapError::ShapeMismatch {
                op: "log_softmax",
                left: va.shape().to_vec(),
                right: vec![],
            });
        }
        let max = va.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logz = va
            .data()
            .iter()
            .map(|&x| (x - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        let value = Tensor::vector(va.data().iter().map(|&x| x - logz).collect());
        self.push("log_softmax", value, vec![a], Op::LogSoftmax)
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), vec![a], Op::Sum)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push("mean", Tensor::scalar(s), vec![a], Op::Mean)
    }

    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push("l2_norm", Tensor::scalar(s), vec![a], Op::L2Norm)
    }

    // ---- losses ----------------------------------------------------------

    /// `-(y ln p + (1-y) ln(1-p))` on a scalar probability.
    pub fn bce(&mut self, p: NodeId, target: f64) -> Result<NodeId> {
        let v = &self.nodes[p.0].value;
        if !v.is_scalar() {
            return Err(KmapError::ShapeMismatch {
                op: "bce",
                left: v.shape().to_vec(),
                right: vec![],
            });
        }
        let pv = v.item();
        let loss = -(target * pv.ln() + (1.0 - target) * (1.0 - pv).ln());
        self.push("bce", Tensor::scalar(loss), vec![p], Op::Bce(target))
    }

    /// BCE straight from the logit: `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_logits(&mut self, z: NodeId, target: f64) -> Result<NodeId> {
        let v = &self.nodes[z.0].value;
        if !v.is_scalar() {
            return Err(KmapError::ShapeMismatch {
                op: "bce_logits",
                left: v.shape().to_vec(),
                right: vec![],
            });
        }
        let zv = v.item();
        let loss = zv.max(0.0) - zv * target + (-zv.abs()).exp().ln_1p();
        self.push(
            "bce_logits",
            Tensor::scalar(loss),
            vec![z],
            Op::BceLogits(target),
        )
    }

    // ---- composite helpers ------------------------------------------------

    /// Mean squared error between two same-shape tensors (taped composition).
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Euclidean distance between two same-shape tensors.
    pub fn l2_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        self.l2_norm(d)
    }

    /// `v / max(||v||, eps)` is not used; this is the exact `v / ||v||`.
    pub fn normalize_l2(&mut self, v: NodeId) -> Result<NodeId> {
        let n = self.l2_norm(v)?;
        self.div_bcast(v, n)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients accumulate additively into
    /// `store` until the caller zeroes them.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(KmapError::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(id, node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], target: NodeId, delta: Tensor) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(
        &self,
        _id: usize,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParamStore,
    ) {
        let p = &node.parents;
        let pval = |i: usize| &self.nodes[p[i].0].value;
        match &node.op {
            Op::Const => {}
            Op::Param(idx) => {
                store.grad_mut(*idx).add_assign(g);
            }
            Op::Add => {
                self.acc(grads, p[0], g.clone());
                self.acc(grads, p[1], g.clone());
            }
            Op::Sub => {
                self.acc(grads, p[0], g.clone());
                let mut neg = g.clone();
                neg.scale_in_place(-1.0);
                self.acc(grads, p[1], neg);
            }
            Op::Mul => {
                let (a, b) = (pval(0), pval(1));
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(b.data()).map(|(&gi, &bi)| gi * bi).collect(),
                )
                .unwrap();
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(a.data()).map(|(&gi, &ai)| gi * ai).collect(),
                )
                .unwrap();
                self.acc(grads, p[0], da);
                self.acc(grads, p[1], db);
            }
            Op::Div => {
                let (a, b) = (pval(0), pval(1));
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(b.data()).map(|(&gi, &bi)| gi / bi).collect(),
                )
                .unwrap();
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                        .collect(),
                )
                .unwrap();
                self.acc(grads, p[0], da);
                self.acc(grads, p[1], db);
            }
            Op::Neg => {
                let mut neg = g.clone();
                neg.scale_in_place(-1.0);
                self.acc(grads, p[0], neg);
            }
            Op::AddN => {
                for parent in p {
                    self.acc(grads, *parent, g.clone());
                }
            }
            Op::Scale(f) => {
                let mut d = g.clone();
                d.scale_in_place(*f);
                self.acc(grads, p[0], d);
            }
            Op::MatVec => {
                let (w, x) = (pval(0), pval(1));
                let (r, c) = (w.rows(), w.cols());
                let mut dw = vec![0.0; r * c];
                let mut dx = vec![0.0; c];
                for i in 0..r {
                    let gi = g.data()[i];
                    let row = w.row(i);
                    for j in 0..c {
                        dw[i * c + j] = gi * x.data()[j];
                        dx[j] += gi * row[j];
                    }
                }
                self.acc(grads, p[0], Tensor::new(vec![r, c], dw).unwrap());
                self.acc(grads, p[1], Tensor::vector(dx));
            }
            Op::VecMat => {
                let (w, m) = (pval(0), pval(1));
                let (r, c) = (m.rows(), m.cols());
                let mut dw = vec![0.0; r];
                let mut dm = vec![0.0; r * c];
                for i in 0..r {
                    let row = m.row(i);
                    let wi = w.data()[i];
                    let mut s = 0.0;
                    for j in 0..c {
                        s += row[j] * g.data()[j];
                        dm[i * c + j] = wi * g.data()[j];
                    }
                    dw[i] = s;
                }
                self.acc(grads, p[0], Tensor::vector(dw));
                self.acc(grads, p[1], Tensor::new(vec![r, c], dm).unwrap());
            }
            Op::Outer => {
                let (u, v) = (pval(0), pval(1));
                let (r, c) = (u.numel(), v.numel());
                let mut du = vec![0.0; r];
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        let gij = g.data()[i * c + j];
                        du[i] += gij * v.data()[j];
                        dv[j] += gij * u.data()[i];
                    }
                }
                self.acc(grads, p[0], Tensor::vector(du));
                self.acc(grads, p[1], Tensor::vector(dv));
            }
            Op::MulRowBcast => {
                let (m, v) = (pval(0), pval(1));
                let (r, c) = (m.rows(), m.cols());
                let mut dm = vec![0.0; r * c];
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        let gij = g.data()[i * c + j];
                        dm[i * c + j] = gij * v.data()[j];
                        dv[j] += gij * m.at(i, j);
                    }
                }
                self.acc(grads, p[0], Tensor::new(vec![r, c], dm).unwrap());
                self.acc(grads, p[1], Tensor::vector(dv));
            }
            Op::MulBcast => {
                let (t, s) = (pval(0), pval(1));
                let sv = s.item();
                let dt = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|&gi| gi * sv).collect(),
                )
                .unwrap();
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&gi, &ti)| gi * ti)
                    .sum();
                self.acc(grads, p[0], dt);
                self.acc(grads, p[1], Tensor::scalar(ds));
            }
            Op::DivBcast => {
                let (t, s) = (pval(0), pval(1));
                let sv = s.item();
                let dt = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|&gi| gi / sv).collect(),
                )
                .unwrap();
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&gi, &ti)| -gi * ti / (sv * sv))
                    .sum();
                self.acc(grads, p[0], dt);
                self.acc(grads, p[1], Tensor::scalar(ds));
            }
            Op::SelectRow(row) => {
                let m = pval(0);
                let (r, c) = (m.rows(), m.cols());
                let mut dm = vec![0.0; r * c];
                dm[row * c..(row + 1) * c].copy_from_slice(g.data());
                self.acc(grads, p[0], Tensor::new(vec![r, c], dm).unwrap());
            }
            Op::Slice { start, len } => {
                let v = pval(0);
                let mut dv = vec![0.0; v.numel()];
                dv[*start..*start + *len].copy_from_slice(g.data());
                self.acc(grads, p[0], Tensor::vector(dv));
            }
            Op::Concat(lens) => {
                let mut offset = 0;
                for (parent, &len) in p.iter().zip(lens.iter()) {
                    let dv = Tensor::vector(g.data()[offset..offset + len].to_vec());
                    offset += len;
                    self.acc(grads, *parent, dv);
                }
            }
            Op::StackScalars => {
                for (i, parent) in p.iter().enumerate() {
                    self.acc(grads, *parent, Tensor::scalar(g.data()[i]));
                }
            }
            Op::Dot => {
                let (u, v) = (pval(0), pval(1));
                let gs = g.item();
                let du = Tensor::vector(v.data().iter().map(|&x| gs * x).collect());
                let dv = Tensor::vector(u.data().iter().map(|&x| gs * x).collect());
                self.acc(grads, p[0], du);
                self.acc(grads, p[1], dv);
            }
            Op::Sigmoid => {
                let y = &node.value;
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                        .collect(),
                )
                .unwrap();
                self.acc(grads, p[0], d);
            }
            Op::Tanh => {
                let y = &node.value;
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gi, &yi)| gi * (1.0 - yi * yi))
                        .collect(),
                )
                .unwrap();
                self.acc(grads, p[0], d);
            }
            Op::Exp => {
                let y = &node.value;
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gi, &yi)| gi * yi)
                        .collect(),
                )
                .unwrap();
                self.acc(grads, p[0], d);
            }
            Op::Ln => {
                let x = pval(0);
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gi, &xi)| gi / xi)
                        .collect(),
                )
                .unwrap();
                self.acc(grads, p[0], d);
            }
            Op::Sqrt => {
                let y = &node.value;
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gi, &yi)| if yi == 0.0 { 0.0 } else { gi / (2.0 * yi) })
                        .collect(),
                )
                .unwrap();
                self.acc(grads, p[0], d);
            }
            Op::Softmax => {
                let y = node.value.data();
                let gy: f64 = g.data().iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
                let d = Tensor::vector(
                    g.data()
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| yi * (gi - gy))
                        .collect(),
                );
                self.acc(grads, p[0], d);
            }
            Op::LogSoftmax => {
                let y = node.value.data();
                let gsum: f64 = g.data().iter().sum();
                let d = Tensor::vector(
                    g.data()
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi - yi.exp() * gsum)
                        .collect(),
                );
                self.acc(grads, p[0], d);
            }
            Op::Sum => {
                let x = pval(0);
                let d = Tensor::filled(x.shape().to_vec(), g.item());
                self.acc(grads, p[0], d);
            }
            Op::Mean => {
                let x = pval(0);
                let d = Tensor::filled(x.shape().to_vec(), g.item() / x.numel() as f64);
                self.acc(grads, p[0], d);
            }
            Op::L2Norm => {
                let x = pval(0);
                let n = node.value.item();
                let gs = g.item();
                let d = if n == 0.0 {
                    Tensor::zeros(x.shape().to_vec())
                } else {
                    Tensor::new(
                        x.shape().to_vec(),
                        x.data().iter().map(|&xi| gs * xi / n).collect(),
                    )
                    .unwrap()
                };
                self.acc(grads, p[0], d);
            }
            Op::Reshape => {
                let x = pval(0);
                let d = Tensor::new(x.shape().to_vec(), g.data().to_vec()).unwrap();
                self.acc(grads, p[0], d);
            }
            Op::Bce(y) => {
                let pv = pval(0).data()[0];
                let gs = g.item();
                let d = gs * (-y / pv + (1.0 - y) / (1.0 - pv));
                self.acc(grads, p[0], Tensor::new(pval(0).shape().to_vec(), vec![d]).unwrap());
            }
            Op::BceLogits(y) => {
                let zv = pval(0).data()[0];
                let gs = g.item();
                let d = gs * (sigmoid(zv) - y);
                self.acc(grads, p[0], Tensor::new(pval(0).shape().to_vec(), vec![d]).unwrap());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::ParamStore;
    use approx::assert_relative_eq;

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.scalar(0.0).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.7; 8])).unwrap();
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert_relative_eq!(v, 0.125, max_relative = 1e-12);
        }
    }

    #[test]
    fn bce_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.scalar(0.5).unwrap();
        let l = g.bce(p, 1.0).unwrap();
        assert_relative_eq!(g.value(l).item(), std::f64::consts::LN_2, max_relative = 1e-12);
    }

    #[test]
    fn backward_square() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let xn = g.param(&store, x).unwrap();
        let sq = g.mul(xn, xn).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_sigmoid_linear() {
        // loss = sigmoid(w * x) at w=0, x=1 -> dloss/dw = 0.25
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::scalar(0.0));
        let mut g = Graph::new();
        let wn = g.param(&store, w).unwrap();
        let x = g.scalar(1.0).unwrap();
        let z = g.mul(wn, x).unwrap();
        let y = g.sigmoid(z).unwrap();
        g.backward(y, &mut store).unwrap();
        assert_relative_eq!(store.grad(w).item(), 0.25, max_relative = 1e-12);
    }

    #[test]
    fn backward_accumulates() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::vector(vec![3.0]));
        let mut g = Graph::new();
        let xn = g.param(&store, x).unwrap();
        let sq = g.mul(xn, xn).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss, &mut store).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(x).data(), &[12.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let xn = g.param(&store, x).unwrap();
        assert!(g.backward(xn, &mut store).is_err());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = g.constant(Tensor::vector(vec![1.0])).unwrap();
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[1]"), "{msg}");
    }

    #[test]
    fn non_finite_output_names_op() {
        let mut g = Graph::new();
        let a = g.scalar(0.0).unwrap();
        let err = g.ln(a).unwrap_err();
        assert!(err.to_string().contains("ln"));
    }

    #[test]
    fn select_row_out_of_range() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        assert!(g.select_row(m, 2).is_err());
    }
}
