//! Tape-based reverse-mode automatic differentiation over [`Tensor`] ops.
//!
//! Forward values are computed eagerly when an op is recorded. Node ids are
//! assigned in recording order, so every node's inputs precede it and the
//! backward sweep is a plain reverse iteration.
//!
//! The op set is closed: elementwise add/sub/mul/scale, matmul, silu, sigmoid,
//! exp, sum, mean, reshape, transpose, row softmax, rmsnorm, the decay-matrix
//! scan used by the mixer, embedding gather, soft-target cross-entropy, and the
//! column slicing/concatenation, row broadcast and causal convolution needed
//! to lay out the mixer's streams.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mixer::{causal_conv, decay_matrix};
use crate::model::rmsnorm;
use crate::scalar::Scalar;
use crate::tensor::{log_softmax_rows, sigmoid, softmax_rows, SoftmaxMask, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Op kinds that take no attributes and can be recorded by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Silu,
    Sigmoid,
    Exp,
    Sum,
    Mean,
    Transpose,
    DecayMatrix,
    ConcatCols,
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "matmul" => OpKind::MatMul,
            "silu" => OpKind::Silu,
            "sigmoid" => OpKind::Sigmoid,
            "exp" => OpKind::Exp,
            "sum" => OpKind::Sum,
            "mean" => OpKind::Mean,
            "transpose" => OpKind::Transpose,
            "decay_matrix" | "cumprod_scan" => OpKind::DecayMatrix,
            "concat_cols" => OpKind::ConcatCols,
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }
}

/// A recorded operation together with its inputs and attributes.
#[derive(Debug, Clone)]
pub enum Op<S> {
    Leaf { name: String, trainable: bool },
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MatMul(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var, Vec<usize>),
    Transpose(Var),
    SoftmaxRows { x: Var, causal: bool },
    RmsNorm { x: Var, weight: Var, eps: S },
    /// `L[i][j] = prod_{k=j+1..=i} a_k` for `j <= i`, zero above the diagonal.
    DecayMatrix(Var),
    Gather { table: Var, ids: Vec<usize> },
    /// Mean over rows of `-sum_v p_v log softmax(logits)_v` against constant targets.
    CrossEntropy { logits: Var, targets: Tensor<S> },
    SliceCols { x: Var, start: usize, width: usize },
    ConcatCols(Vec<Var>),
    BroadcastRows { x: Var, rows: usize },
    CausalConv { x: Var, kernel: Var },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf { .. } | Constant => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | Silu(a) | Sigmoid(a) | Exp(a) | Sum(a) | Mean(a) | Reshape(a, _)
            | Transpose(a) | DecayMatrix(a) => vec![*a],
            SoftmaxRows { x, .. } | SliceCols { x, .. } | BroadcastRows { x, .. } => vec![*x],
            RmsNorm { x, weight, .. } => vec![*x, *weight],
            Gather { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
            ConcatCols(parts) => parts.clone(),
            CausalConv { x, kernel } => vec![*x, *kernel],
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients for every leaf on a tape, keyed by leaf node id.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMap<S> {
    grads: BTreeMap<usize, Tensor<S>>,
    names: BTreeMap<String, usize>,
}

impl<S: Scalar> GradMap<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(&var.0)
    }

    pub fn get_named(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.get(name).and_then(|id| self.grads.get(id))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names
            .iter()
            .map(|(name, id)| (name.as_str(), &self.grads[id]))
    }

    /// Gradients keyed by leaf name, for leaves that were registered with one.
    pub fn into_named(self) -> BTreeMap<String, Tensor<S>> {
        let mut grads = self.grads;
        self.names
            .into_iter()
            .map(|(name, id)| {
                let g = grads.remove(&id).expect("named leaf has a gradient");
                (name, g)
            })
            .collect()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Registers a named parameter. Frozen leaves are recorded but gradients
    /// never flow into them.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> Var {
        self.push(
            Op::Leaf {
                name: name.into(),
                trainable,
            },
            value,
            trainable,
        )
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(Op::Constant, value, false)
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an attribute-free op by name, e.g. `"add"` or `"matmul"`.
    pub fn record_named(&mut self, kind: &str, inputs: &[Var]) -> Result<Var> {
        let kind: OpKind = kind.parse()?;
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Autodiff(format!(
                    "{kind:?} takes {n} input(s), got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        let op = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match kind {
                    OpKind::Add => Op::Add(a, b),
                    OpKind::Sub => Op::Sub(a, b),
                    OpKind::Mul => Op::Mul(a, b),
                    _ => Op::MatMul(a, b),
                }
            }
            OpKind::ConcatCols => Op::ConcatCols(inputs.to_vec()),
            unary => {
                arity(1)?;
                let a = inputs[0];
                match unary {
                    OpKind::Silu => Op::Silu(a),
                    OpKind::Sigmoid => Op::Sigmoid(a),
                    OpKind::Exp => Op::Exp(a),
                    OpKind::Sum => Op::Sum(a),
                    OpKind::Mean => Op::Mean(a),
                    OpKind::Transpose => Op::Transpose(a),
                    _ => Op::DecayMatrix(a),
                }
            }
        };
        self.record(op)
    }

    /// Validates the inputs of `op`, evaluates it and appends it to the tape.
    pub fn record(&mut self, op: Op<S>) -> Result<Var> {
        let inputs = op.inputs();
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::Autodiff(format!(
                "input node {} is not on the tape",
                bad.0
            )));
        }
        let value = match &op {
            Op::Leaf { .. } | Op::Constant => {
                return Err(Error::Autodiff(
                    "leaves are created with `leaf` or `constant`".into(),
                ))
            }
            Op::Add(a, b) => self.value(*a).add(self.value(*b))?,
            Op::Sub(a, b) => self.value(*a).sub(self.value(*b))?,
            Op::Mul(a, b) => self.value(*a).mul(self.value(*b))?,
            Op::Scale(a, k) => self.value(*a).scale(*k),
            Op::MatMul(a, b) => self.value(*a).matmul(self.value(*b))?,
            Op::Silu(a) => self.value(*a).silu(),
            Op::Sigmoid(a) => self.value(*a).sigmoid(),
            Op::Exp(a) => self.value(*a).exp(),
            Op::Sum(a) => Tensor::scalar(self.value(*a).sum()),
            Op::Mean(a) => Tensor::scalar(self.value(*a).mean()),
            Op::Reshape(a, shape) => self.value(*a).reshape(shape)?,
            Op::Transpose(a) => self.value(*a).transpose()?,
            Op::SoftmaxRows { x, causal } => {
                let mask = if *causal {
                    SoftmaxMask::Causal
                } else {
                    SoftmaxMask::None
                };
                softmax_rows(self.value(*x), &mask)?
            }
            Op::RmsNorm { x, weight, eps } => rmsnorm(self.value(*x), self.value(*weight), *eps)?,
            Op::DecayMatrix(a) => decay_matrix(self.value(*a))?,
            Op::Gather { table, ids } => gather_rows(self.value(*table), ids)?,
            Op::CrossEntropy { logits, targets } => {
                let l = self.value(*logits);
                if l.shape() != targets.shape() {
                    return Err(Error::dim("cross_entropy", l.shape(), targets.shape()));
                }
                let (rows, _) = l.dims2()?;
                let lsm = log_softmax_rows(l)?;
                let total: S = lsm
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&lp, &p)| -p * lp)
                    .sum();
                Tensor::scalar(total / S::lit(rows as f64))
            }
            Op::SliceCols { x, start, width } => self.value(*x).slice_cols(*start, *width)?,
            Op::ConcatCols(parts) => {
                let vals: Vec<&Tensor<S>> = parts.iter().map(|p| self.value(*p)).collect();
                Tensor::concat_cols(&vals)?
            }
            Op::BroadcastRows { x, rows } => self.value(*x).broadcast_rows(*rows)?,
            Op::CausalConv { x, kernel } => causal_conv(self.value(*x), self.value(*kernel))?,
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, value, requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: S) -> Result<Var> {
        self.record(Op::Scale(a, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape(a, shape.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        self.record(Op::SoftmaxRows { x, causal })
    }

    pub fn rmsnorm(&mut self, x: Var, weight: Var, eps: S) -> Result<Var> {
        self.record(Op::RmsNorm { x, weight, eps })
    }

    pub fn decay_matrix(&mut self, a: Var) -> Result<Var> {
        self.record(Op::DecayMatrix(a))
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.record(Op::Gather {
            table,
            ids: ids.to_vec(),
        })
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: Tensor<S>) -> Result<Var> {
        self.record(Op::CrossEntropy { logits, targets })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        self.record(Op::SliceCols { x, start, width })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::ConcatCols(parts.to_vec()))
    }

    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        self.record(Op::BroadcastRows { x, rows })
    }

    pub fn causal_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        self.record(Op::CausalConv { x, kernel })
    }

    /// Squared difference summed over all elements.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.sum(sq)
    }

    /// Reverse sweep from a scalar `loss`, producing a gradient for every leaf.
    pub fn backward(&self, loss: Var) -> Result<GradMap<S>> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Autodiff(format!("loss node {} not on tape", loss.0)))?;
        if loss_node.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(loss_node.value.shape()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf { .. } = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }

        let mut out = BTreeMap::new();
        let mut names = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name, .. } = &node.op {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(id, g);
                names.insert(name.clone(), id);
            }
        }
        Ok(GradMap { grads: out, names })
    }

    fn backprop_node(
        &self,
        node: &Node<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor<S>| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf { .. } | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-S::one()))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(val(*b))?)?;
                acc(*b, g.mul(val(*a))?)?;
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k))?,
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(val(*b))?)?;
                acc(*b, val(*a).t_matmul(g)?)?;
            }
            Op::Silu(a) => {
                let d = val(*a).map(|x| {
                    let s = sigmoid(x);
                    s * (S::one() + x * (S::one() - s))
                });
                acc(*a, g.mul(&d)?)?;
            }
            Op::Sigmoid(a) => acc(*a, g.mul(&y.map(|s| s * (S::one() - s)))?)?,
            Op::Exp(a) => acc(*a, g.mul(y)?)?,
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.data()[0]))?,
            Op::Mean(a) => {
                let x = val(*a);
                let k = g.data()[0] / S::lit(x.len() as f64);
                acc(*a, Tensor::full(x.shape(), k))?;
            }
            Op::Reshape(a, _) => acc(*a, g.reshape(val(*a).shape())?)?,
            Op::Transpose(a) => acc(*a, g.transpose()?)?,
            Op::SoftmaxRows { x, .. } => {
                let (m, n) = y.dims2()?;
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dotp: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    out.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dotp)));
                }
                acc(*x, Tensor::new(vec![m, n], out)?)?;
            }
            Op::RmsNorm { x, weight, eps } => {
                let (gx, gw) = rmsnorm_backward(val(*x), val(*weight), *eps, g)?;
                acc(*x, gx)?;
                acc(*weight, gw)?;
            }
            Op::DecayMatrix(a) => acc(*a, decay_matrix_backward(val(*a), y, g)?)?,
            Op::Gather { table, ids } => {
                let t = val(*table);
                let (_, d) = t.dims2()?;
                let mut gt = Tensor::zeros(t.shape());
                let dst = gt.data_mut();
                for (row, &id) in ids.iter().enumerate() {
                    for (o, &v) in dst[id * d..(id + 1) * d].iter_mut().zip(g.row(row)) {
                        *o += v;
                    }
                }
                acc(*table, gt)?;
            }
            Op::CrossEntropy { logits, targets } => {
                let l = val(*logits);
                let (rows, cols) = l.dims2()?;
                let probs = softmax_rows(l, &SoftmaxMask::None)?;
                let k = g.data()[0] / S::lit(rows as f64);
                let mut out = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    let mass: S = targets.row(i).iter().copied().sum();
                    out.extend(
                        probs
                            .row(i)
                            .iter()
                            .zip(targets.row(i))
                            .map(|(&q, &p)| k * (mass * q - p)),
                    );
                }
                acc(*logits, Tensor::new(vec![rows, cols], out)?)?;
            }
            Op::SliceCols { x, start, width } => {
                let (r, c) = val(*x).dims2()?;
                let mut gx = Tensor::zeros(&[r, c]);
                let dst = gx.data_mut();
                for i in 0..r {
                    dst[i * c + start..i * c + start + width].copy_from_slice(g.row(i));
                }
                acc(*x, gx)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let (_, w) = val(*p).dims2()?;
                    acc(*p, g.slice_cols(start, w)?)?;
                    start += w;
                }
            }
            Op::BroadcastRows { x, .. } => {
                let xs = val(*x).shape().to_vec();
                let (rows, n) = g.dims2()?;
                let mut out = vec![S::zero(); n];
                for i in 0..rows {
                    for (o, &v) in out.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*x, Tensor::new(xs, out)?)?;
            }
            Op::CausalConv { x, kernel } => {
                let (gx, gk) = causal_conv_backward(val(*x), val(*kernel), g)?;
                acc(*x, gx)?;
                acc(*kernel, gk)?;
            }
        }
        Ok(())
    }
}

fn gather_rows<S: Scalar>(table: &Tensor<S>, ids: &[usize]) -> Result<Tensor<S>> {
    let (v, d) = table.dims2()?;
    if ids.is_empty() {
        return Err(Error::Input("gather with no ids".into()));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::Input(format!("gather id {id} out of range for {v} rows")));
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], out)
}

fn rmsnorm_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    eps: S,
    g: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let d = w.len();
    let rows = x.len() / d;
    let dn = S::lit(d as f64);
    let mut gx = Vec::with_capacity(x.len());
    let mut gw = vec![S::zero(); d];
    for i in 0..rows {
        let xr = &x.data()[i * d..(i + 1) * d];
        let gr = &g.data()[i * d..(i + 1) * d];
        let ms: S = xr.iter().map(|&v| v * v).sum::<S>() / dn;
        let r = S::one() / (ms + eps).sqrt();
        let mut proj = S::zero();
        for j in 0..d {
            proj += gr[j] * w.data()[j] * xr[j];
            gw[j] += gr[j] * xr[j] * r;
        }
        let r3 = r * r * r / dn;
        for j in 0..d {
            gx.push(r * gr[j] * w.data()[j] - xr[j] * r3 * proj);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
    ))
}

/// Gradient of the decay matrix w.r.t. the decay factors, taken in log space.
///
/// `dL[i][j]/dlog a_k = L[i][j]` for `j < k <= i`, so the log-gradient of
/// `a_k` is the sum of `G ⊙ L` over the block `i >= k, j < k`. That block sum
/// is updated incrementally in k.
fn decay_matrix_backward<S: Scalar>(
    a: &Tensor<S>,
    l: &Tensor<S>,
    g: &Tensor<S>,
) -> Result<Tensor<S>> {
    let t = a.len();
    let w = g.mul(l)?;
    let mut out = vec![S::zero(); t];
    let mut block = S::zero();
    for k in 1..t {
        // block(k) = block(k-1) - sum_{j<k-1} W[k-1][j] + sum_{i>=k} W[i][k-1]
        let prev = k - 1;
        for j in 0..prev {
            block -= w.at2(prev, j);
        }
        for i in k..t {
            block += w.at2(i, prev);
        }
        out[k] = block / a.data()[k];
    }
    Tensor::new(a.shape().to_vec(), out)
}

fn causal_conv_backward<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    g: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (t, c) = x.dims2()?;
    let (_, width) = kernel.dims2()?;
    let mut gx = vec![S::zero(); t * c];
    let mut gk = vec![S::zero(); c * width];
    for step in 0..t {
        for k in 0..width {
            let Some(src) = (step + k + 1).checked_sub(width) else {
                continue;
            };
            for ch in 0..c {
                let gv = g.data()[step * c + ch];
                gx[src * c + ch] += kernel.data()[ch * width + k] * gv;
                gk[ch * width + k] += x.data()[src * c + ch] * gv;
            }
        }
    }
    Ok((
        Tensor::new(vec![t, c], gx)?,
        Tensor::new(vec![c, width], gk)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` around every element of `x`.
    fn fd_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let h = 1e-5;
        let mut out = x.clone();
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn assert_close(analytic: &Tensor<f64>, fd: &Tensor<f64>, what: &str) {
        for (a, f) in analytic.data().iter().zip(fd.data()) {
            let rel = (a - f).abs() / (f.abs() + 1e-8);
            assert!(rel < 1e-3, "{what}: analytic {a} vs fd {f}");
        }
    }

    /// Builds `sum(build(x) ⊙ probe)` and checks d/dx against finite differences.
    fn check_unary(x: Tensor<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var, what: &str) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |xv: &Tensor<f64>, probe: Option<&Tensor<f64>>| {
            let mut tape = Tape::new();
            let xl = tape.leaf("x", xv.clone(), true);
            let y = build(&mut tape, xl);
            let probe = probe
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(y).shape()));
            let pc = tape.constant(probe);
            let prod = tape.mul(y, pc).unwrap();
            let loss = tape.sum(prod).unwrap();
            (tape, loss, xl, y)
        };
        let (tape0, _, _, y0) = eval(&x, None);
        let yshape = tape0.value(y0).shape().to_vec();
        let probe = Tensor::randn(&yshape, 1.0, &mut rng);
        let (tape, loss, xl, _) = eval(&x, Some(&probe));
        let grads = tape.backward(loss).unwrap();
        let fd = fd_grad(&x, &|xv| {
            let (t, l, _, _) = eval(xv, Some(&probe));
            t.value(l).data()[0]
        });
        assert_close(grads.get(xl).unwrap(), &fd, what);
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn record_is_append_only_and_passthrough() {
        let mut tape = Tape::new();
        let a = tape.leaf("a", rand_t(&[2, 3], 1), true);
        let b = tape.constant(rand_t(&[2, 3], 2));
        let c = tape.record_named("add", &[a, b]).unwrap();
        assert!(c.id() > b.id() && b.id() > a.id());
        assert_eq!(
            tape.value(c),
            &tape.value(a).add(tape.value(b)).unwrap()
        );
        assert!(matches!(
            tape.record_named("conv3d", &[a]),
            Err(Error::UnsupportedOp(_))
        ));
        assert!(tape.record_named("add", &[a]).is_err());
        assert!(tape.record(Op::Add(a, Var(99))).is_err());
    }

    #[test]
    fn chain_replays_direct_computation() {
        let x = rand_t(&[4], 3);
        let y = rand_t(&[4], 4);
        let mut tape = Tape::new();
        let xv = tape.leaf("x", x.clone(), true);
        let yv = tape.constant(y.clone());
        let m = tape.mul(xv, yv).unwrap();
        let s = tape.sum(m).unwrap();
        let direct: f64 = x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        assert_eq!(tape.value(s).data()[0], direct);
    }

    #[test]
    fn sum_and_product_gradients() {
        let x = rand_t(&[3, 2], 5);
        let y = rand_t(&[3, 2], 6);
        let mut tape = Tape::new();
        let xv = tape.leaf("x", x.clone(), true);
        let s = tape.sum(xv).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(xv).unwrap(), &Tensor::ones(&[3, 2]));

        let mut tape = Tape::new();
        let xv = tape.leaf("x", x, true);
        let yv = tape.leaf("y", y.clone(), false);
        let p = tape.mul(xv, yv).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(xv).unwrap(), &y);
        assert_eq!(g.get_named("y").unwrap(), &Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf("x", rand_t(&[2], 1), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf("x", rand_t(&[2], 1), true);
        let u = tape.leaf("unused", rand_t(&[3, 3], 2), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(u).unwrap(), &Tensor::zeros(&[3, 3]));
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn elementwise_gradients() {
        check_unary(rand_t(&[3, 4], 10), |t, x| t.silu(x).unwrap(), "silu");
        check_unary(rand_t(&[3, 4], 11), |t, x| t.sigmoid(x).unwrap(), "sigmoid");
        check_unary(rand_t(&[3, 4], 12), |t, x| t.exp(x).unwrap(), "exp");
        check_unary(rand_t(&[3, 4], 13), |t, x| t.scale(x, -2.5).unwrap(), "scale");
        check_unary(rand_t(&[3, 4], 14), |t, x| t.mul(x, x).unwrap(), "square");
        check_unary(rand_t(&[3, 4], 15), |t, x| t.sub(x, x).unwrap(), "sub");
        check_unary(rand_t(&[3, 4], 16), |t, x| t.mean(x).unwrap(), "mean");
    }

    #[test]
    fn structural_gradients() {
        check_unary(rand_t(&[3, 4], 20), |t, x| t.transpose(x).unwrap(), "transpose");
        check_unary(rand_t(&[3, 4], 21), |t, x| t.reshape(x, &[2, 6]).unwrap(), "reshape");
        check_unary(rand_t(&[3, 4], 22), |t, x| t.slice_cols(x, 1, 2).unwrap(), "slice");
        check_unary(
            rand_t(&[3, 4], 23),
            |t, x| {
                let s = t.slice_cols(x, 0, 1).unwrap();
                t.concat_cols(&[x, s, x]).unwrap()
            },
            "concat",
        );
        check_unary(rand_t(&[1, 4], 24), |t, x| t.broadcast_rows(x, 5).unwrap(), "broadcast");
        check_unary(rand_t(&[5, 3], 25), |t, x| t.gather(x, &[0, 4, 4, 2]).unwrap(), "gather");
    }

    #[test]
    fn matmul_gradients() {
        let b = rand_t(&[4, 2], 31);
        check_unary(
            rand_t(&[3, 4], 30),
            |t, x| {
                let bc = t.constant(b.clone());
                t.matmul(x, bc).unwrap()
            },
            "matmul lhs",
        );
        let a = rand_t(&[3, 4], 32);
        check_unary(
            rand_t(&[4, 2], 33),
            |t, x| {
                let ac = t.constant(a.clone());
                t.matmul(ac, x).unwrap()
            },
            "matmul rhs",
        );
    }

    #[test]
    fn softmax_and_norm_gradients() {
        check_unary(rand_t(&[4, 4], 40), |t, x| t.softmax_rows(x, true).unwrap(), "softmax causal");
        check_unary(rand_t(&[3, 5], 41), |t, x| t.softmax_rows(x, false).unwrap(), "softmax");
        let w = rand_t(&[5], 42);
        check_unary(
            rand_t(&[3, 5], 43),
            |t, x| {
                let wc = t.constant(w.clone());
                t.rmsnorm(x, wc, 1e-5).unwrap()
            },
            "rmsnorm x",
        );
        let x = rand_t(&[3, 5], 44);
        check_unary(
            rand_t(&[5], 45),
            |t, w| {
                let xc = t.constant(x.clone());
                t.rmsnorm(xc, w, 1e-5).unwrap()
            },
            "rmsnorm weight",
        );
    }

    #[test]
    fn decay_matrix_gradient() {
        let a = rand_t(&[6], 50).map(sigmoid);
        check_unary(a, |t, x| t.decay_matrix(x).unwrap(), "decay matrix");
    }

    #[test]
    fn causal_conv_gradients() {
        let k = rand_t(&[3, 4], 60);
        check_unary(
            rand_t(&[6, 3], 61),
            |t, x| {
                let kc = t.constant(k.clone());
                t.causal_conv(x, kc).unwrap()
            },
            "conv input",
        );
        let x = rand_t(&[6, 3], 62);
        check_unary(
            rand_t(&[3, 4], 63),
            |t, k| {
                let xc = t.constant(x.clone());
                t.causal_conv(xc, k).unwrap()
            },
            "conv kernel",
        );
    }

    #[test]
    fn cross_entropy_gradient() {
        let targets = softmax_rows(&rand_t(&[3, 5], 70), &SoftmaxMask::None).unwrap();
        let x = rand_t(&[3, 5], 71);
        let mut tape = Tape::new();
        let xl = tape.leaf("x", x.clone(), true);
        let l = tape.cross_entropy(xl, targets.clone()).unwrap();
        let g = tape.backward(l).unwrap();
        let fd = fd_grad(&x, &|xv| {
            let mut t = Tape::new();
            let c = t.constant(xv.clone());
            let l = t.cross_entropy(c, targets.clone()).unwrap();
            t.value(l).data()[0]
        });
        assert_close(g.get(xl).unwrap(), &fd, "cross entropy");
    }

    fn two_losses(alpha: f64, beta: f64) -> (GradMap<f64>, GradMap<f64>, GradMap<f64>) {
        let x = rand_t(&[3, 3], 80);
        let w = rand_t(&[3, 3], 81);
        let run = |a: f64, b: f64| {
            let mut t = Tape::new();
            let xv = t.leaf("x", x.clone(), true);
            let wv = t.leaf("w", w.clone(), true);
            let h = t.matmul(xv, wv).unwrap();
            let s = t.silu(h).unwrap();
            let l1 = t.sum(s).unwrap();
            let e = t.softmax_rows(h, true).unwrap();
            let l2 = t.sq_dist(e, xv).unwrap();
            let l1s = t.scale(l1, a).unwrap();
            let l2s = t.scale(l2, b).unwrap();
            let total = t.add(l1s, l2s).unwrap();
            t.backward(total).unwrap()
        };
        (run(alpha, beta), run(1.0, 0.0), run(0.0, 1.0))
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let (alpha, beta) = (0.7, -1.3);
        let (both, g1, g2) = two_losses(alpha, beta);
        for name in ["x", "w"] {
            let expect = g1
                .get_named(name)
                .unwrap()
                .scale(alpha)
                .add(&g2.get_named(name).unwrap().scale(beta))
                .unwrap();
            assert!(both.get_named(name).unwrap().max_abs_diff(&expect).unwrap() < 1e-10);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", rand_t(&[4, 4], 90), true);
        let h = tape.matmul(x, x).unwrap();
        let s = tape.softmax_rows(h, true).unwrap();
        let l = tape.sum(s).unwrap();
        let a = tape.backward(l).unwrap();
        let b = tape.backward(l).unwrap();
        let bits = |g: &GradMap<f64>| -> Vec<u64> {
            g.get(x).unwrap().data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }
}
