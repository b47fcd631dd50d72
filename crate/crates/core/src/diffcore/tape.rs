//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation is evaluated when it is recorded. The recorded graph can
//! be re-run with new leaf values through [`Tape::forward`], and
//! [`Tape::backward`] walks the nodes in reverse insertion order exactly once.
//!
//! Conventions: the subgradient of `relu` at 0 is 0, the gradient of a
//! Euclidean norm at the origin is 0, and `max` routes its gradient to the
//! lowest index among tied maxima.

use super::tensor::{affine_rows, argmax, log_sum_exp, softmax, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Norm(Var),
    RowNorms(Var),
    SubRow(Var, Var),
    Index(Var, usize),
    Row(Var, usize),
    MeanRows(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    Stack(Vec<Var>),
    Max(Var),
    SoftmaxNll(Var, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::SubRow(a, b) => {
                vec![*a, *b]
            }
            Op::Relu(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Norm(a)
            | Op::RowNorms(a)
            | Op::Index(a, _)
            | Op::Row(a, _)
            | Op::MeanRows(a, _)
            | Op::SelectRows(a, _)
            | Op::Max(a)
            | Op::SoftmaxNll(a, _) => vec![*a],
            Op::Stack(vs) => vs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Gradients of one scalar output with respect to every node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `None` when the node does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when it does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Differentiable input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Fixed quantity that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Leaves in creation order.
    pub fn leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, _)| Var(i))
            .collect()
    }

    // ---- recording -------------------------------------------------------

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.push(Op::Affine { x, w, b })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    /// `max(0, a)`, identical to [`Tape::relu`].
    pub fn hinge(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Offset(a, c))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    /// Euclidean norm over all elements.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Norm(a))
    }

    /// Per-row Euclidean norms of a matrix, `[rows, d] -> [rows]`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowNorms(a))
    }

    /// Subtracts vector `v` from every row of `a`.
    pub fn sub_row(&mut self, a: Var, v: Var) -> Result<Var> {
        self.push(Op::SubRow(a, v))
    }

    /// Flat element `i` as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        self.push(Op::Index(a, i))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.push(Op::Row(a, i))
    }

    /// Mean of the selected rows of a matrix.
    pub fn mean_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        self.push(Op::MeanRows(a, rows))
    }

    /// Rows of a matrix (or elements of a vector) in the given order.
    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        self.push(Op::SelectRows(a, rows))
    }

    /// Packs one-element nodes into a vector.
    pub fn stack(&mut self, items: Vec<Var>) -> Result<Var> {
        self.push(Op::Stack(items))
    }

    pub fn max(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Max(a))
    }

    /// Per-row `-log softmax(z)_y`. A vector `z` takes one label and yields a scalar.
    pub fn softmax_nll(&mut self, z: Var, labels: Vec<usize>) -> Result<Var> {
        self.push(Op::SoftmaxNll(z, labels))
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        let inputs = op.inputs();
        if let Some(bad) = inputs.iter().find(|v| v.0 >= id) {
            return Err(Error::ShapeMismatch {
                node: id,
                detail: format!("input {} is not on this tape", bad.0),
            });
        }
        let value = self.compute(id, &op)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(id))
    }

    // ---- replay ----------------------------------------------------------

    /// Re-runs the recorded graph with new leaf values (creation order) and
    /// returns the value of the last node.
    pub fn forward(&mut self, inputs: &[Tensor]) -> Result<Tensor> {
        let leaves = self.leaves();
        if leaves.len() != inputs.len() {
            return Err(Error::LeafCount {
                expected: leaves.len(),
                got: inputs.len(),
            });
        }
        for (leaf, t) in leaves.iter().zip(inputs) {
            let node = &mut self.nodes[leaf.0];
            if node.value.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    node: leaf.0,
                    detail: format!(
                        "leaf declared {:?}, input has {:?}",
                        node.value.shape(),
                        t.shape()
                    ),
                });
            }
            node.value = t.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf | Op::Constant) {
                continue;
            }
            let value = self.compute(i, &self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        self.nodes
            .last()
            .map(|n| n.value.clone())
            .ok_or(Error::InvalidArgument("forward on an empty tape".into()))
    }

    // ---- evaluation ------------------------------------------------------

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn compute(&self, id: usize, op: &Op) -> Result<Tensor> {
        let mismatch = |detail: String| Error::ShapeMismatch { node: id, detail };
        Ok(match op {
            Op::Leaf | Op::Constant => unreachable!("leaves are never recomputed"),
            Op::Affine { x, w, b } => {
                let (x, w, b) = (self.val(*x), self.val(*w), self.val(*b));
                if w.rank() != 2 {
                    return Err(mismatch(format!("affine weight must be rank 2, got {:?}", w.shape())));
                }
                let (m, n) = (w.shape()[0], w.shape()[1]);
                if b.shape() != [m] {
                    return Err(mismatch(format!("affine bias {:?} vs weight {:?}", b.shape(), w.shape())));
                }
                let (rows, out_shape) = match x.shape() {
                    [k] if *k == n => (1, vec![m]),
                    [r, k] if *k == n => (*r, vec![*r, m]),
                    s => {
                        return Err(mismatch(format!("affine input {:?} vs weight {:?}", s, w.shape())))
                    }
                };
                Tensor::from_parts(out_shape, affine_rows(x.data(), rows, n, w.data(), m, b.data()))
            }
            Op::Relu(a) => self.val(*a).map(|v| if v > 0.0 { v } else { 0.0 }),
            Op::Add(a, b) => self.binary(id, *a, *b, BinKind::Add)?,
            Op::Sub(a, b) => self.binary(id, *a, *b, BinKind::Sub)?,
            Op::Mul(a, b) => self.binary(id, *a, *b, BinKind::Mul)?,
            Op::Div(a, b) => self.binary(id, *a, *b, BinKind::Div)?,
            Op::Scale(a, s) => self.val(*a).map(|v| v * s),
            Op::Offset(a, c) => self.val(*a).map(|v| v + c),
            Op::Square(a) => self.val(*a).map(|v| v * v),
            Op::Sum(a) => Tensor::scalar(self.val(*a).data().iter().sum()),
            Op::Mean(a) => {
                let a = self.val(*a);
                if a.is_empty() {
                    return Err(mismatch("mean of an empty tensor".into()));
                }
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            Op::Norm(a) => Tensor::scalar(self.val(*a).norm()),
            Op::RowNorms(a) => {
                let a = self.val(*a);
                if a.rank() != 2 {
                    return Err(mismatch(format!("row_norms needs a matrix, got {:?}", a.shape())));
                }
                let norms = (0..a.rows())
                    .map(|r| a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                Tensor::vector(norms)
            }
            Op::SubRow(a, v) => {
                let (a, v) = (self.val(*a), self.val(*v));
                if a.rank() != 2 || v.shape() != [a.cols()] {
                    return Err(mismatch(format!("sub_row {:?} - {:?}", a.shape(), v.shape())));
                }
                let c = a.cols();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, x)| x - v.data()[k % c])
                    .collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Op::Index(a, i) => {
                let a = self.val(*a);
                if *i >= a.len() {
                    return Err(mismatch(format!("index {} out of {} elements", i, a.len())));
                }
                Tensor::scalar(a.data()[*i])
            }
            Op::Row(a, i) => {
                let a = self.val(*a);
                if a.rank() != 2 || *i >= a.rows() {
                    return Err(mismatch(format!("row {} of {:?}", i, a.shape())));
                }
                Tensor::vector(a.row(*i).to_vec())
            }
            Op::MeanRows(a, rows) => {
                let a = self.val(*a);
                if a.rank() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= a.rows()) {
                    return Err(mismatch(format!(
                        "mean_rows over {} rows of {:?}",
                        rows.len(),
                        a.shape()
                    )));
                }
                let c = a.cols();
                let mut acc = vec![0.0; c];
                for &r in rows {
                    for (s, x) in acc.iter_mut().zip(a.row(r)) {
                        *s += x;
                    }
                }
                let inv = 1.0 / rows.len() as f64;
                Tensor::vector(acc.into_iter().map(|s| s * inv).collect())
            }
            Op::SelectRows(a, rows) => {
                let a = self.val(*a);
                let (n, c) = match a.rank() {
                    1 => (a.len(), 1),
                    2 => (a.rows(), a.cols()),
                    _ => return Err(mismatch(format!("select_rows of {:?}", a.shape()))),
                };
                if let Some(&r) = rows.iter().find(|&&r| r >= n) {
                    return Err(mismatch(format!("row {} of {:?}", r, a.shape())));
                }
                let data = rows.iter().flat_map(|&r| a.data()[r * c..(r + 1) * c].iter().copied()).collect();
                let shape = if a.rank() == 1 { vec![rows.len()] } else { vec![rows.len(), c] };
                Tensor::from_parts(shape, data)
            }
            Op::Stack(items) => {
                let mut data = Vec::with_capacity(items.len());
                for v in items {
                    let t = self.val(*v);
                    if !t.is_scalar() {
                        return Err(mismatch(format!("stack item {} has shape {:?}", v.0, t.shape())));
                    }
                    data.push(t.data()[0]);
                }
                Tensor::vector(data)
            }
            Op::Max(a) => {
                let a = self.val(*a);
                if a.is_empty() {
                    return Err(mismatch("max of an empty tensor".into()));
                }
                Tensor::scalar(a.data()[argmax(a.data())])
            }
            Op::SoftmaxNll(z, labels) => {
                let z = self.val(*z);
                let c = z.cols();
                let rows = match z.rank() {
                    1 => 1,
                    2 => z.rows(),
                    _ => return Err(mismatch(format!("softmax_nll logits {:?}", z.shape()))),
                };
                if labels.len() != rows {
                    return Err(mismatch(format!("{} labels for {} logit rows", labels.len(), rows)));
                }
                if let Some(&y) = labels.iter().find(|&&y| y >= c) {
                    return Err(mismatch(format!("label {} with {} classes", y, c)));
                }
                let losses: Vec<f64> = (0..rows)
                    .map(|r| {
                        let zr = &z.data()[r * c..(r + 1) * c];
                        log_sum_exp(zr) - zr[labels[r]]
                    })
                    .collect();
                if z.rank() == 1 {
                    Tensor::scalar(losses[0])
                } else {
                    Tensor::vector(losses)
                }
            }
        })
    }

    fn binary(&self, id: usize, a: Var, b: Var, kind: BinKind) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor::from_parts(ta.shape().to_vec(), data))
        } else if tb.is_scalar() {
            let y = tb.data()[0];
            Ok(ta.map(|x| f(x, y)))
        } else if ta.is_scalar() {
            let x = ta.data()[0];
            Ok(tb.map(|y| f(x, y)))
        } else {
            Err(Error::ShapeMismatch {
                node: id,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            })
        }
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of the one-element node `output`, scaled by `seed`.
    pub fn backward_seeded(&self, output: Var, seed: f64) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if !out.value.is_scalar() {
            return Err(Error::NonScalarOutput {
                node: output.0,
                shape: out.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::from_parts(out.value.shape().to_vec(), vec![seed]));

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.backward_seeded(output, 1.0)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(
                    self.nodes[v.0].value.shape().to_vec(),
                    contribution,
                ))
            }
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Affine { x, w, b } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (m, n) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.len() / n;
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; rows * n];
                    for r in 0..rows {
                        let dxr = &mut dx[r * n..(r + 1) * n];
                        for j in 0..m {
                            let gj = gd[r * m + j];
                            if gj == 0.0 {
                                continue;
                            }
                            let wj = &tw.data()[j * n..(j + 1) * n];
                            for k in 0..n {
                                dxr[k] += gj * wj[k];
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0; m * n];
                    for r in 0..rows {
                        let xr = &tx.data()[r * n..(r + 1) * n];
                        for j in 0..m {
                            let gj = gd[r * m + j];
                            if gj == 0.0 {
                                continue;
                            }
                            let dwj = &mut dw[j * n..(j + 1) * n];
                            for k in 0..n {
                                dwj[k] += gj * xr[k];
                            }
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; m];
                    for r in 0..rows {
                        for j in 0..m {
                            db[j] += gd[r * m + j];
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu(a) => {
                let ta = self.val(*a);
                let d = ta
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let kind = match op {
                    Op::Add(..) => BinKind::Add,
                    Op::Sub(..) => BinKind::Sub,
                    Op::Mul(..) => BinKind::Mul,
                    _ => BinKind::Div,
                };
                self.propagate_binary(*a, *b, kind, gd, grads);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gd.iter().map(|gi| gi * s).collect()),
            Op::Offset(a, _) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Square(a) => {
                let d = self.val(*a).data().iter().zip(gd).map(|(x, gi)| 2.0 * x * gi).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.val(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.val(*a).len();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::Norm(a) => {
                let ta = self.val(*a);
                let nrm = out.data()[0];
                let d = if nrm > 0.0 {
                    ta.data().iter().map(|x| gd[0] * x / nrm).collect()
                } else {
                    vec![0.0; ta.len()]
                };
                self.accumulate(grads, *a, d);
            }
            Op::RowNorms(a) => {
                let ta = self.val(*a);
                let c = ta.cols();
                let mut d = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    let nrm = out.data()[r];
                    if nrm > 0.0 {
                        let s = gd[r] / nrm;
                        for k in 0..c {
                            d[r * c + k] = s * ta.data()[r * c + k];
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SubRow(a, v) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.nodes[v.0].requires_grad {
                    let c = self.val(*v).len();
                    let mut dv = vec![0.0; c];
                    for (k, gi) in gd.iter().enumerate() {
                        dv[k % c] -= gi;
                    }
                    self.accumulate(grads, *v, dv);
                }
            }
            Op::Index(a, i) => {
                let mut d = vec![0.0; self.val(*a).len()];
                d[*i] = gd[0];
                self.accumulate(grads, *a, d);
            }
            Op::Row(a, i) => {
                let ta = self.val(*a);
                let c = ta.cols();
                let mut d = vec![0.0; ta.len()];
                d[i * c..(i + 1) * c].copy_from_slice(gd);
                self.accumulate(grads, *a, d);
            }
            Op::MeanRows(a, rows) => {
                let ta = self.val(*a);
                let c = ta.cols();
                let inv = 1.0 / rows.len() as f64;
                let mut d = vec![0.0; ta.len()];
                for &r in rows {
                    for k in 0..c {
                        d[r * c + k] += gd[k] * inv;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SelectRows(a, rows) => {
                let ta = self.val(*a);
                let c = if ta.rank() == 2 { ta.cols() } else { 1 };
                let mut d = vec![0.0; ta.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += gd[k * c + j];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Stack(items) => {
                for (v, gi) in items.iter().zip(gd) {
                    self.accumulate(grads, *v, vec![*gi]);
                }
            }
            Op::Max(a) => {
                let ta = self.val(*a);
                let mut d = vec![0.0; ta.len()];
                d[argmax(ta.data())] = gd[0];
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxNll(z, labels) => {
                let tz = self.val(*z);
                let c = tz.cols();
                let mut d = vec![0.0; tz.len()];
                for (r, &y) in labels.iter().enumerate() {
                    let p = softmax(&tz.data()[r * c..(r + 1) * c]);
                    for k in 0..c {
                        let target = if k == y { 1.0 } else { 0.0 };
                        d[r * c + k] = gd[r] * (p[k] - target);
                    }
                }
                self.accumulate(grads, *z, d);
            }
        }
    }

    fn propagate_binary(&self, a: Var, b: Var, kind: BinKind, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let (ta, tb) = (self.val(a), self.val(b));
        let n = gd.len();
        let at = |k: usize| if ta.len() == n { ta.data()[k] } else { ta.data()[0] };
        let bt = |k: usize| if tb.len() == n { tb.data()[k] } else { tb.data()[0] };
        let mut da = vec![0.0; n];
        let mut db = vec![0.0; n];
        for k in 0..n {
            let (x, y, gi) = (at(k), bt(k), gd[k]);
            match kind {
                BinKind::Add => {
                    da[k] = gi;
                    db[k] = gi;
                }
                BinKind::Sub => {
                    da[k] = gi;
                    db[k] = -gi;
                }
                BinKind::Mul => {
                    da[k] = gi * y;
                    db[k] = gi * x;
                }
                BinKind::Div => {
                    da[k] = gi / y;
                    db[k] = -gi * x / (y * y);
                }
            }
        }
        let reduce = |d: Vec<f64>, len: usize| if len == n { d } else { vec![d.iter().sum()] };
        self.accumulate(grads, a, reduce(da, ta.len()));
        self.accumulate(grads, b, reduce(db, tb.len()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn identity_affine_forward() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let x = t.leaf(Tensor::vector(vec![3.0, 4.0]));
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn relu_forward_and_zero_subgradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.relu(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0]);
    }

    #[test]
    fn uniform_logits_give_log_class_count() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let l = t.softmax_nll(z, vec![0]).unwrap();
        assert!(approx(t.scalar(l), 3f64.ln(), 1e-15));
        assert!(approx(t.scalar(l), 1.0986, 1e-4));
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.square(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = t.scale(x, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(Error::NonScalarOutput { .. })));
    }

    #[test]
    fn shape_mismatch_reports_node() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        match t.add(a, b) {
            Err(Error::ShapeMismatch { node, .. }) => assert_eq!(node, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn replay_recomputes_and_checks_leaf_shapes() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let y = t.square(x).unwrap();
        let _ = t.offset(y, 1.0).unwrap();
        let out = t.forward(&[Tensor::scalar(5.0)]).unwrap();
        assert_eq!(out.data(), &[26.0]);
        match t.forward(&[Tensor::vector(vec![1.0, 2.0])]) {
            Err(Error::ShapeMismatch { node, .. }) => assert_eq!(node, 0),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(t.forward(&[]), Err(Error::LeafCount { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(4.0));
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(c, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).data(), &[4.0]);
    }

    #[test]
    fn max_routes_to_lowest_tied_index() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 5.0, 5.0]));
        let m = t.max(x).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn norm_at_origin_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let n = t.norm(x).unwrap();
        let g = t.backward(n).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
    }
}
