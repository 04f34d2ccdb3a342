//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is built fresh for every training step. Leaves are registered
//! with [`Tape::leaf`]; every primitive appends one node whose inputs precede
//! it, so the node list is always in topological order. [`Tape::backward`]
//! walks the list in reverse and returns a [`GradMap`] holding the gradient of
//! every node that (a) requires grad and (b) has a path to the loss.
//!
//! Stop-gradient is expressed with [`Tape::detach`]: the detached node does
//! not require grad, so nothing upstream of it is reached unless another path
//! exists.
//!
//! ```
//! use emalab_core::autodiff::Tape;
//! use emalab_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_rows(&[[1.0, 2.0]]), false).unwrap();
//! let w = tape.leaf(Tensor::from_rows(&[[3.0], [4.0]]), true).unwrap();
//! let y = tape.matmul(x, w).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for row normalization.
pub const EPS_NORM: f64 = 1e-12;
/// Variance offset inside batch normalization.
pub const EPS_BN: f64 = 1e-5;
/// Weight of the old value when folding batch statistics into running ones.
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    MatMul,
    Transpose,
    AddBias,
    Add,
    Mul,
    Relu,
    BatchNorm,
    L2Normalize,
    Softmax,
    ConcatRows,
    Scale,
    DetachMark,
    NegCosineRowwise,
    SoftCrossEntropy,
    Mean,
    Sum,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::AddBias => "add_bias",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Relu => "relu",
            Primitive::BatchNorm => "batch_norm",
            Primitive::L2Normalize => "l2_normalize",
            Primitive::Softmax => "softmax",
            Primitive::ConcatRows => "concat_rows",
            Primitive::Scale => "scale",
            Primitive::DetachMark => "detach_mark",
            Primitive::NegCosineRowwise => "neg_cosine_rowwise",
            Primitive::SoftCrossEntropy => "soft_cross_entropy",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
        }
    }
}

/// Train mode normalizes with batch statistics, eval mode with running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Running mean/variance carried by a batch-norm layer.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    /// Fold one batch into the running estimate; variance is stored unbiased.
    pub fn absorb(&mut self, batch: &BatchStats) {
        let n = batch.count as f64;
        let correction = if batch.count > 1 { n / (n - 1.0) } else { 1.0 };
        for j in 0..self.mean.len() {
            self.mean[j] = BN_MOMENTUM * self.mean[j] + (1.0 - BN_MOMENTUM) * batch.mean[j];
            self.var[j] =
                BN_MOMENTUM * self.var[j] + (1.0 - BN_MOMENTUM) * batch.var[j] * correction;
        }
    }
}

/// Statistics of one train-mode batch-norm forward (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

enum Saved {
    None,
    /// Normalized input and per-feature 1/sqrt(var + eps).
    Norm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    /// Per-row pre-normalization norms.
    RowNorms(Vec<f64>),
    /// Per-row norms of both operands plus the row cosines.
    Cosine {
        na: Vec<f64>,
        nb: Vec<f64>,
        cos: Vec<f64>,
    },
    /// Softmax probabilities and log-probabilities of the logits.
    LogSoftmax {
        p: Vec<f64>,
        logp: Vec<f64>,
    },
    Factor(f64),
}

struct Node {
    prim: Primitive,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    saved: Saved,
}

/// Gradients keyed by node. Missing entry means no gradient path to the loss.
#[derive(Debug, Default)]
pub struct GradMap {
    grads: HashMap<usize, Tensor>,
}

impl GradMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.grads.contains_key(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn remove(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v.0)
    }
}

/// Step-scoped record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// View a rank-1 tensor as a single row, a rank-2 tensor as itself.
fn as_rows(primitive: Primitive, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [m, n] => Ok((*m, *n)),
        s => Err(Error::dim(
            primitive.name(),
            format!("expected rank 1 or 2, got shape {s:?}"),
        )),
    }
}

fn matrix(primitive: Primitive, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| {
        Error::dim(
            primitive.name(),
            format!("expected a matrix, got shape {:?}", t.shape()),
        )
    })
}

fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_data(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn log_softmax_row(row: &[f64], logp: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (l, v) in logp.iter_mut().zip(row) {
        *l = v - lse;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node; handles from before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn primitive(&self, v: Var) -> Primitive {
        self.nodes[v.0].prim
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(
            Primitive::Leaf,
            vec![],
            value,
            Saved::None,
            Some(requires_grad),
        )
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(
        &mut self,
        prim: Primitive,
        inputs: Vec<Var>,
        value: Tensor,
        saved: Saved,
        requires_grad: Option<bool>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                primitive: prim.name(),
                stage: None,
                step: None,
            });
        }
        let requires_grad =
            requires_grad.unwrap_or_else(|| inputs.iter().any(|v| self.nodes[v.0].requires_grad));
        self.nodes.push(Node {
            prim,
            inputs,
            value,
            requires_grad,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = Primitive::MatMul;
        let (m, k) = matrix(p, self.value(a))?;
        let (k2, n) = matrix(p, self.value(b))?;
        if k != k2 {
            return Err(Error::dim(p.name(), format!("[{m},{k}] x [{k2},{n}]")));
        }
        let data = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push(p, vec![a, b], value, Saved::None, None)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let p = Primitive::Transpose;
        let (m, n) = matrix(p, self.value(a))?;
        let value = Tensor::new(vec![n, m], transpose_data(self.value(a).data(), m, n))?;
        self.push(p, vec![a], value, Saved::None, None)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let p = Primitive::AddBias;
        let (m, n) = matrix(p, self.value(x))?;
        if self.value(bias).shape() != [n] {
            return Err(Error::dim(
                p.name(),
                format!("bias {:?} for {n} columns", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += b[j];
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        self.push(p, vec![x, bias], value, Saved::None, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = Primitive::Add;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(
                p.name(),
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(p, vec![a, b], value, Saved::None, None)
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = Primitive::Mul;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(
                p.name(),
                format!("{:?} * {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(p, vec![a, b], value, Saved::None, None)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Primitive::Relu, vec![x], value, Saved::None, None)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(
            Primitive::Scale,
            vec![x],
            value,
            Saved::Factor(factor),
            None,
        )
    }

    /// Value-preserving copy through which no gradient flows.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(
            Primitive::DetachMark,
            vec![x],
            value,
            Saved::None,
            Some(false),
        )
    }

    /// Batch normalization over the rows of `x: [batch, features]`.
    ///
    /// In train mode the batch statistics are returned so the owner of the
    /// layer can fold them into its running estimate.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        phase: Phase,
        running: &RunningStats,
    ) -> Result<(Var, Option<BatchStats>)> {
        let p = Primitive::BatchNorm;
        let (m, n) = matrix(p, self.value(x))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [n] {
                return Err(Error::dim(
                    p.name(),
                    format!("{name} {:?} for {n} features", self.value(v).shape()),
                ));
            }
        }
        if running.mean.len() != n || running.var.len() != n {
            return Err(Error::dim(p.name(), "running statistics width"));
        }
        if m == 0 {
            return Err(Error::dim(p.name(), "empty batch"));
        }
        let xd = self.value(x).data();
        let (mean, var, stats) = match phase {
            Phase::Train => {
                let mut mean = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        mean[j] += xd[i * n + j];
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        let d = xd[i * n + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: m,
                };
                (mean, var, Some(stats))
            }
            Phase::Eval => (running.mean.clone(), running.var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS_BN).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let h = (xd[i * n + j] - mean[j]) * inv_std[j];
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let saved = Saved::Norm {
            xhat,
            inv_std,
            train: phase == Phase::Train,
        };
        let v = self.push(p, vec![x, gamma, beta], value, saved, None)?;
        Ok((v, stats))
    }

    /// Row-wise `v / max(|v|, EPS_NORM)`; rank-1 input is one row.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let p = Primitive::L2Normalize;
        let (m, n) = as_rows(p, self.value(x))?;
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(EPS_NORM);
            for j in 0..n {
                out[i * n + j] = row[j] / denom;
            }
            norms.push(norm);
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(p, vec![x], value, Saved::RowNorms(norms), None)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let p = Primitive::Softmax;
        let (m, n) = as_rows(p, self.value(x))?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                total += e;
            }
            out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(p, vec![x], value, Saved::None, None)
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let p = Primitive::ConcatRows;
        if parts.is_empty() {
            return Err(Error::dim(p.name(), "nothing to concatenate"));
        }
        let (_, n) = matrix(p, self.value(parts[0]))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in parts {
            let (m, c) = matrix(p, self.value(v))?;
            if c != n {
                return Err(Error::dim(p.name(), format!("column count {c} vs {n}")));
            }
            rows += m;
            data.extend_from_slice(self.value(v).data());
        }
        let value = Tensor::new(vec![rows, n], data)?;
        self.push(p, parts.to_vec(), value, Saved::None, None)
    }

    /// Per-row negative cosine similarity `-(a_i . b_i) / (|a_i| |b_i|)`,
    /// each norm floored at `EPS_NORM`. Output shape `[rows]`.
    pub fn neg_cosine_rowwise(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = Primitive::NegCosineRowwise;
        let (m, n) = as_rows(p, self.value(a))?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                p.name(),
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut na = Vec::with_capacity(m);
        let mut nb = Vec::with_capacity(m);
        let mut cos = Vec::with_capacity(m);
        for i in 0..m {
            let (ra, rb) = (&ad[i * n..(i + 1) * n], &bd[i * n..(i + 1) * n]);
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let la = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let lb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            cos.push(dot / (la.max(EPS_NORM) * lb.max(EPS_NORM)));
            na.push(la);
            nb.push(lb);
        }
        let value = Tensor::new(vec![m], cos.iter().map(|c| -c).collect())?;
        self.push(p, vec![a, b], value, Saved::Cosine { na, nb, cos }, None)
    }

    /// Per-row cross-entropy `-sum_k q_k log softmax(logits)_k` against a
    /// target distribution `q` of the same shape. Output shape `[rows]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var> {
        let pr = Primitive::SoftCrossEntropy;
        let (m, n) = as_rows(pr, self.value(logits))?;
        if self.value(logits).shape() != self.value(target).shape() {
            return Err(Error::dim(
                pr.name(),
                format!(
                    "{:?} vs {:?}",
                    self.value(logits).shape(),
                    self.value(target).shape()
                ),
            ));
        }
        let (ld, qd) = (self.value(logits).data(), self.value(target).data());
        let mut logp = vec![0.0; m * n];
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            log_softmax_row(&ld[i * n..(i + 1) * n], &mut logp[i * n..(i + 1) * n]);
            let ce: f64 = (0..n).map(|j| -qd[i * n + j] * logp[i * n + j]).sum();
            out.push(ce);
        }
        let p = logp.iter().map(|l| l.exp()).collect();
        let value = Tensor::new(vec![m], out)?;
        self.push(
            pr,
            vec![logits, target],
            value,
            Saved::LogSoftmax { p, logp },
            None,
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::dim(Primitive::Mean.name(), "mean of nothing"));
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(Primitive::Mean, vec![x], value, Saved::None, None)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Primitive::Sum, vec![x], value, Saved::None, None)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node that requires grad and lies on a path to `loss` gets an
    /// entry, intermediates included.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(GradMap::default());
        }
        grads[loss.0] = Some(Tensor::filled(root.value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = self.input_grads(node, &g);
            grads[id] = Some(g);
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contrib.data())
                        .for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| {
                let g = g?;
                self.nodes[id].requires_grad.then_some((id, g))
            })
            .collect();
        Ok(GradMap { grads })
    }

    /// Vector-Jacobian products for each input of `node`, given the output
    /// gradient `g`. `None` marks inputs that need no gradient.
    fn input_grads(&self, node: &Node, g: &Tensor) -> Vec<Option<Tensor>> {
        let wants = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        let val = |k: usize| &self.nodes[node.inputs[k].0].value;
        let gd = g.data();
        match node.prim {
            Primitive::Leaf | Primitive::DetachMark => vec![],
            Primitive::MatMul => {
                let (m, k) = val(0).dims2().unwrap();
                let (_, n) = val(1).dims2().unwrap();
                let ga = wants(0).then(|| {
                    let bt = transpose_data(val(1).data(), k, n);
                    Tensor::new(vec![m, k], gemm(gd, &bt, m, n, k)).unwrap()
                });
                let gb = wants(1).then(|| {
                    let at = transpose_data(val(0).data(), m, k);
                    Tensor::new(vec![k, n], gemm(&at, gd, k, m, n)).unwrap()
                });
                vec![ga, gb]
            }
            Primitive::Transpose => {
                let (m, n) = val(0).dims2().unwrap();
                vec![Some(
                    Tensor::new(vec![m, n], transpose_data(gd, n, m)).unwrap(),
                )]
            }
            Primitive::AddBias => {
                let (m, n) = val(0).dims2().unwrap();
                let gb = wants(1).then(|| {
                    let mut acc = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            acc[j] += gd[i * n + j];
                        }
                    }
                    Tensor::vector(acc)
                });
                vec![wants(0).then(|| g.clone()), gb]
            }
            Primitive::Add => vec![wants(0).then(|| g.clone()), wants(1).then(|| g.clone())],
            Primitive::Mul => {
                let prod = |other: &Tensor| {
                    let data = gd.iter().zip(other.data()).map(|(a, b)| a * b).collect();
                    Tensor::new(g.shape().to_vec(), data).unwrap()
                };
                vec![
                    wants(0).then(|| prod(val(1))),
                    wants(1).then(|| prod(val(0))),
                ]
            }
            Primitive::Relu => {
                let x = val(0).data();
                let data = gd
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data).unwrap())]
            }
            Primitive::Scale => {
                let Saved::Factor(c) = node.saved else {
                    unreachable!()
                };
                vec![Some(g.map(|v| v * c))]
            }
            Primitive::BatchNorm => {
                let Saved::Norm {
                    ref xhat,
                    ref inv_std,
                    train,
                } = node.saved
                else {
                    unreachable!()
                };
                let (m, n) = val(0).dims2().unwrap();
                let gamma = val(1).data();
                let mut sum_g = vec![0.0; n];
                let mut sum_gx = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        sum_g[j] += gd[i * n + j];
                        sum_gx[j] += gd[i * n + j] * xhat[i * n + j];
                    }
                }
                let gx = wants(0).then(|| {
                    let mut out = vec![0.0; m * n];
                    let mf = m as f64;
                    for i in 0..m {
                        for j in 0..n {
                            let k = i * n + j;
                            out[k] = if train {
                                gamma[j] * inv_std[j] / mf
                                    * (mf * gd[k] - sum_g[j] - xhat[k] * sum_gx[j])
                            } else {
                                gd[k] * gamma[j] * inv_std[j]
                            };
                        }
                    }
                    Tensor::new(vec![m, n], out).unwrap()
                });
                vec![
                    gx,
                    wants(1).then(|| Tensor::vector(sum_gx)),
                    wants(2).then(|| Tensor::vector(sum_g)),
                ]
            }
            Primitive::L2Normalize => {
                let Saved::RowNorms(ref norms) = node.saved else {
                    unreachable!()
                };
                let y = node.value.data();
                let n = y.len() / norms.len();
                let mut out = vec![0.0; y.len()];
                for (i, &norm) in norms.iter().enumerate() {
                    let r = i * n..(i + 1) * n;
                    if norm > EPS_NORM {
                        let dot: f64 = gd[r.clone()]
                            .iter()
                            .zip(&y[r.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for k in r {
                            out[k] = (gd[k] - y[k] * dot) / norm;
                        }
                    } else {
                        for k in r {
                            out[k] = gd[k] / EPS_NORM;
                        }
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), out).unwrap())]
            }
            Primitive::Softmax => {
                let s = node.value.data();
                let (m, n) = as_rows(node.prim, &node.value).unwrap();
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: f64 = gd[r.clone()]
                        .iter()
                        .zip(&s[r.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for k in r {
                        out[k] = s[k] * (gd[k] - dot);
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), out).unwrap())]
            }
            Primitive::ConcatRows => {
                let mut offset = 0;
                node.inputs
                    .iter()
                    .map(|v| {
                        let t = &self.nodes[v.0].value;
                        let len = t.len();
                        let slice = &gd[offset..offset + len];
                        offset += len;
                        self.nodes[v.0]
                            .requires_grad
                            .then(|| Tensor::new(t.shape().to_vec(), slice.to_vec()).unwrap())
                    })
                    .collect()
            }
            Primitive::NegCosineRowwise => {
                let Saved::Cosine {
                    ref na,
                    ref nb,
                    ref cos,
                } = node.saved
                else {
                    unreachable!()
                };
                let (a, b) = (val(0), val(1));
                let (m, n) = as_rows(node.prim, a).unwrap();
                // d(-cos)/du = -(w / (|u| |w|) - cos * u / |u|^2); the second
                // term vanishes when |u| sits on the EPS_NORM floor.
                let side = |u: &[f64], w: &[f64], nu: &[f64], nw: &[f64]| {
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        let du = nu[i].max(EPS_NORM);
                        let dw = nw[i].max(EPS_NORM);
                        let self_term = if nu[i] > EPS_NORM {
                            cos[i] / (nu[i] * nu[i])
                        } else {
                            0.0
                        };
                        for j in 0..n {
                            let k = i * n + j;
                            out[k] = -gd[i] * (w[k] / (du * dw) - self_term * u[k]);
                        }
                    }
                    Tensor::new(a.shape().to_vec(), out).unwrap()
                };
                vec![
                    wants(0).then(|| side(a.data(), b.data(), na, nb)),
                    wants(1).then(|| side(b.data(), a.data(), nb, na)),
                ]
            }
            Primitive::SoftCrossEntropy => {
                let Saved::LogSoftmax { ref p, ref logp } = node.saved else {
                    unreachable!()
                };
                let q = val(1).data();
                let (m, n) = as_rows(node.prim, val(0)).unwrap();
                let glogits = wants(0).then(|| {
                    let mut out = vec![0.0; m * n];
                    for (i, g) in gd.iter().enumerate().take(m) {
                        let r = i * n..(i + 1) * n;
                        let mass: f64 = q[r.clone()].iter().sum();
                        for k in r {
                            out[k] = g * (p[k] * mass - q[k]);
                        }
                    }
                    Tensor::new(val(0).shape().to_vec(), out).unwrap()
                });
                let gtarget = wants(1).then(|| {
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            out[i * n + j] = -gd[i] * logp[i * n + j];
                        }
                    }
                    Tensor::new(val(1).shape().to_vec(), out).unwrap()
                });
                vec![glogits, gtarget]
            }
            Primitive::Mean => {
                let x = val(0);
                let share = gd[0] / x.len() as f64;
                vec![Some(Tensor::filled(x.shape(), share))]
            }
            Primitive::Sum => vec![Some(Tensor::filled(val(0).shape(), gd[0]))],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, rows: &[&[f64]], rg: bool) -> Var {
        tape.leaf(Tensor::from_rows(rows), rg).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]), false).unwrap();
        let s = tape.softmax(x).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]), false)
            .unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]), false).unwrap();
        let y = tape.l2_normalize(x).unwrap();
        // 3/5 and 4/5 evaluated independently.
        let norm = (3.0f64 * 3.0 + 4.0 * 4.0).sqrt();
        assert_eq!(tape.value(y).data(), &[3.0 / norm, 4.0 / norm]);
        assert!((tape.value(y).data()[0] - 0.6).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sum_of_product_gradient_is_the_other_factor() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[&[1.0, 2.0]], false);
        let w = tape.leaf(Tensor::from_rows(&[[3.0], [4.0]]), true).unwrap();
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
        assert!(!grads.contains(x));
    }

    #[test]
    fn detach_blocks_all_ancestors() {
        let mut tape = Tape::new();
        let w = leaf(&mut tape, &[&[1.0, -2.0], &[0.5, 3.0]], true);
        let x = leaf(&mut tape, &[&[1.0, 1.0]], false);
        let z = tape.matmul(x, w).unwrap();
        let zr = tape.relu(z).unwrap();
        let zd = tape.detach(zr).unwrap();
        assert!(!tape.requires_grad(zd));
        assert!(tape.value(zd).bit_eq(tape.value(zr)));

        let p = leaf(&mut tape, &[&[0.3, -0.7]], true);
        let c = tape.neg_cosine_rowwise(p, zd).unwrap();
        let loss = tape.mean(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.contains(p));
        for v in [w, z, zr, zd] {
            assert!(!grads.contains(v), "{v:?} should have no gradient");
        }
    }

    #[test]
    fn non_finite_leaf_and_op_output_are_rejected() {
        let mut tape = Tape::new();
        let bad = tape.leaf(Tensor::vector(vec![f64::NAN]), false);
        assert!(matches!(
            bad,
            Err(Error::NonFinite {
                primitive: "leaf",
                ..
            })
        ));

        let x = tape.leaf(Tensor::vector(vec![1e300]), false).unwrap();
        let y = tape.scale(x, 1e300);
        match y {
            Err(Error::NonFinite { primitive, .. }) => assert_eq!(primitive, "scale"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[&[1.0, 2.0]], false);
        let b = leaf(&mut tape, &[&[1.0, 2.0]], false);
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::Dimension {
                primitive: "matmul",
                ..
            })
        ));
        let c = tape
            .leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), false)
            .unwrap();
        assert!(matches!(tape.add_bias(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[&[1.0, 2.0]], true);
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_norm_train_normalizes_and_reports_stats() {
        let mut tape = Tape::new();
        let x = leaf(
            &mut tape,
            &[&[1.0, 10.0], &[3.0, 20.0], &[5.0, 60.0]],
            false,
        );
        let g = tape.leaf(Tensor::vector(vec![1.0, 1.0]), false).unwrap();
        let b = tape.leaf(Tensor::vector(vec![0.0, 0.0]), false).unwrap();
        let running = RunningStats::new(2);
        let (y, stats) = tape.batch_norm(x, g, b, Phase::Train, &running).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![3.0, 30.0]);
        assert_eq!(stats.count, 3);
        let y = tape.value(y);
        for j in 0..2 {
            let col: Vec<f64> = (0..3).map(|i| y.data()[i * 2 + j]).collect();
            let mean = col.iter().sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
        }

        let mut rs = RunningStats::new(2);
        rs.absorb(&stats);
        assert!((rs.mean[0] - 0.3).abs() < 1e-15);
        // unbiased variance of [1,3,5] is 4
        assert!((rs.var[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[&[2.0], &[4.0]], false);
        let g = tape.leaf(Tensor::vector(vec![2.0]), false).unwrap();
        let b = tape.leaf(Tensor::vector(vec![1.0]), false).unwrap();
        let running = RunningStats {
            mean: vec![2.0],
            var: vec![4.0 - EPS_BN],
        };
        let (y, stats) = tape.batch_norm(x, g, b, Phase::Eval, &running).unwrap();
        assert!(stats.is_none());
        let y = tape.value(y).data();
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!((y[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn shared_node_accumulates_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.5, -2.0]), true).unwrap();
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
        // intermediates are retained
        assert_eq!(grads.get(y).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn concat_rows_splits_gradient() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[&[1.0, 2.0]], true);
        let b = leaf(&mut tape, &[&[3.0, 4.0], &[5.0, 6.0]], true);
        let c = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[3, 2]);
        let s = tape.scale(c, 2.0).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().shape(), &[1, 2]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0; 4]);
    }
}
