//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the tape in reverse, accumulating vector-Jacobian products into the
//! nodes that need them. Leaves created from tensors with
//! `requires_grad == false` are constants and never receive a gradient.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Kd {
        new: Var,
        width: usize,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inference: bool,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape on which no node ever requires a gradient.
    pub fn inference() -> Self {
        Tape {
            inference: true,
            ..Tape::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad: needs_grad && !self.inference,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a tensor as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("{what} must be 2-D, got {s:?}"))),
        }
    }

    /// `x·w + b` for `x: N×din`, `w: din×dout`, `b: dout`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.affine_impl(x, w, Some(b))
    }

    /// `x·w` without bias.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.affine_impl(x, w, None)
    }

    fn affine_impl(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.dims2(x, "affine input")?;
        let (wr, dout) = self.dims2(w, "affine weight")?;
        if wr != din {
            return Err(Error::shape(format!(
                "affine input has {din} columns but weight has {wr} rows"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(format!(
                    "affine bias shape {:?}, expected [{dout}]",
                    self.shape(b)
                )));
            }
        }
        let y = kernels::affine(self.value(x), self.value(w), b.map(|b| self.value(b)), n, din, dout);
        let needs = self.node(x).needs_grad || self.node(w).needs_grad || b.is_some_and(|b| self.node(b).needs_grad);
        Ok(self.push(vec![n, dout], y, Op::Affine { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu(self.value(x));
        let shape = self.shape(x).to_vec();
        let needs = self.node(x).needs_grad;
        self.push(shape, y, Op::Relu(x), needs)
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(logits, "logits")?;
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} logit rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Label { label: bad, classes: c });
        }
        let lsm = kernels::log_softmax_rows(self.value(logits), n, c, c);
        let loss = -labels.iter().enumerate().map(|(i, &y)| lsm[i * c + y]).sum::<f64>() / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        let probs = lsm.iter().map(|v| v.exp()).collect();
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Distillation term: mean over rows of `−Σ_{k<C_old} S_k(old)·log S_k(new[:, :C_old])`.
    ///
    /// `old_logits` come from a frozen model and are treated as constants.
    pub fn kd_term(&mut self, new_logits: Var, old_logits: &Tensor) -> Result<Var> {
        let (n, c_total) = self.dims2(new_logits, "new logits")?;
        if old_logits.shape().len() != 2 || old_logits.rows() != n {
            return Err(Error::shape(format!(
                "old logits shape {:?} does not match {n} rows",
                old_logits.shape()
            )));
        }
        let c_old = old_logits.cols();
        if c_old == 0 {
            return Err(Error::contract("distillation needs at least one old class"));
        }
        if c_old > c_total {
            return Err(Error::shape(format!(
                "{c_old} old classes exceed {c_total} current classes"
            )));
        }
        let target = kernels::softmax_rows(old_logits.data(), n, c_old, c_old);
        let lsm = kernels::log_softmax_rows(self.value(new_logits), n, c_total, c_old);
        let loss = -target.iter().zip(&lsm).map(|(t, l)| t * l).sum::<f64>() / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("distillation loss".into()));
        }
        let probs = lsm.iter().map(|v| v.exp()).collect();
        let needs = self.node(new_logits).needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Kd {
                new: new_logits,
                width: c_old,
                target,
                probs,
            },
            needs,
        ))
    }

    /// Concatenates 2-D nodes with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concatenation of zero parts"));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let mut n = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat part")?;
            if *n.get_or_insert(r) != r {
                return Err(Error::shape("concat parts have different row counts"));
            }
            widths.push(c);
        }
        let n = n.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                y.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.node(p).needs_grad);
        Ok(self.push(vec![n, total], y, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(shape, y, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let y = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.node(a).needs_grad;
        self.push(shape, y, Op::Scale(a, factor), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let needs = self.node(a).needs_grad;
        self.push(vec![1], vec![s], Op::Sum(a), needs)
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    /// Populates gradients of `loss` with respect to every node that needs one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.shape(loss) != [1] {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.scalar(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.backward_done = true;
        if !self.node(loss).needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = self.nodes[idx].grad.clone() else {
                continue;
            };
            // Split borrow: the op is read while other nodes are updated.
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            match &op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let dout = self.shape(*w)[1];
                    if self.node(*x).needs_grad {
                        let dx = kernels::affine_grad_input(&gy, self.value(*w), n, din, dout);
                        self.accumulate(*x, dx);
                    }
                    if self.node(*w).needs_grad {
                        let dw = kernels::affine_grad_weight(self.value(*x), &gy, n, din, dout);
                        self.accumulate(*w, dw);
                    }
                    if let Some(b) = b {
                        if self.node(*b).needs_grad {
                            self.accumulate(*b, kernels::affine_grad_bias(&gy, n, dout));
                        }
                    }
                }
                Op::Relu(x) => {
                    let dx = self
                        .value(*x)
                        .iter()
                        .zip(&gy)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    self.accumulate(*x, dx);
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let s = gy[0] / n as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        d[i * c + y] -= s;
                    }
                    self.accumulate(*logits, d);
                }
                Op::Kd {
                    new,
                    width,
                    target,
                    probs,
                } => {
                    let (n, c_total) = (self.shape(*new)[0], self.shape(*new)[1]);
                    let s = gy[0] / n as f64;
                    let mut d = vec![0.0; n * c_total];
                    for i in 0..n {
                        let t = &target[i * width..(i + 1) * width];
                        let q = &probs[i * width..(i + 1) * width];
                        let tsum: f64 = t.iter().sum();
                        for k in 0..*width {
                            d[i * c_total + k] = s * (q[k] * tsum - t[k]);
                        }
                    }
                    self.accumulate(*new, d);
                }
                Op::ConcatCols(parts) => {
                    let n = self.shape(parts[0])[0];
                    let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p)[1]).collect();
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        if self.node(p).needs_grad {
                            let mut d = Vec::with_capacity(n * w);
                            for i in 0..n {
                                d.extend_from_slice(&gy[i * total + offset..i * total + offset + w]);
                            }
                            self.accumulate(p, d);
                        }
                        offset += w;
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(*a, gy.clone());
                    self.accumulate(*b, gy);
                }
                Op::Scale(a, f) => {
                    let d = gy.iter().map(|g| g * f).collect();
                    self.accumulate(*a, d);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    self.accumulate(*a, vec![gy[0]; n]);
                }
            }
            self.nodes[idx].op = op;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(g) = &node.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of tape node {i}")));
                }
            }
        }
        Ok(())
    }
}
