//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node in construction order; the
//! inputs of a node always precede it, so [`Graph::backward`] walks the node
//! list in exact reverse and never needs a topological sort.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// `b` is broadcast over the leading axes of `a`.
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: f32,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Option<Vec<f32>>,
        probs: Vec<f32>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    MeanAxis1 {
        x: Var,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Scale { .. } => "scale",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::GatherRows { .. } => "gather_rows",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::MeanAxis1 { .. } => "mean_axis1",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Bmm { a, b, .. } | Op::Add { a, b } => vec![*a, *b],
            Op::AddBroadcast { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale { a: x, .. }
            | Op::Gelu { x }
            | Op::Softmax { x }
            | Op::CrossEntropy { logits: x, .. }
            | Op::GatherRows { x, .. }
            | Op::Permute { x, .. }
            | Op::Reshape { x }
            | Op::MeanAxis1 { x } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// One record of the operation log: op kind, input ids, output id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub kind: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// Operation tape. With gradients disabled every node is recorded as a
/// constant and [`Graph::backward`] has nothing to do.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that tracks no gradients (inference mode).
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn records(&self) -> Vec<NodeRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeRecord {
                kind: n.op.kind(),
                inputs: n.op.inputs().iter().map(|v| v.0).collect(),
                output: i,
            })
            .collect()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Accumulated gradient of the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op) -> Var {
        let rg = self.any_grad(&op.inputs());
        self.push(value, op, rg)
    }

    // ---- operations -------------------------------------------------------

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.record(value, Op::MatMul { a, b }))
    }

    /// Batched product `[B×m×k]·[B×k×n]`, or `[B×m×k]·[B×n×k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (batch, m, k) = self.value(a).dims3()?;
        let (batch2, r, c) = self.value(b).dims3()?;
        let (k2, n) = if trans_b { (c, r) } else { (r, c) };
        if batch != batch2 || k != k2 {
            return Err(Error::Dimension(format!(
                "bmm of {:?} and {:?} (trans_b = {trans_b})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.record(value, Op::Bmm { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(value, Op::Add { a, b }))
    }

    /// `a + b` where `b`'s shape equals a suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Dimension(format!(
                "cannot broadcast {sb:?} onto {sa:?}"
            )));
        }
        let bv = self.value(b).data();
        let period = bv.len();
        let mut data = self.value(a).data().to_vec();
        if period > 0 {
            for chunk in data.chunks_exact_mut(period) {
                for (x, y) in chunk.iter_mut().zip(bv) {
                    *x += y;
                }
            }
        }
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.record(value, Op::AddBroadcast { a, b }))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(value, Op::Scale { a, s }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::Dimension(format!(
                "layer_norm over last dim {d} with gamma {:?} and beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (out, mean, rstd) = kernels::layer_norm_rows(
            self.value(x).data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.record(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| kernels::gelu_scalar(v))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.record(value, Op::Gelu { x }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        let data = kernels::softmax_rows(self.value(x).data(), n);
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.record(value, Op::Softmax { x }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`;
    /// with `class_weights` it is the weighted mean `Σ w_y·nll / Σ w_y`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: Option<&[f32]>,
    ) -> Result<Var> {
        let (rows, k) = self.value(logits).dims2()?;
        if labels.len() != rows {
            return Err(Error::Dimension(format!(
                "cross_entropy: {rows} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        if let Some(w) = class_weights {
            if w.len() != k {
                return Err(Error::Dimension(format!(
                    "cross_entropy: {} class weights for {k} classes",
                    w.len()
                )));
            }
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(rows * k);
        let mut total = 0.0f64;
        let mut norm = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * k..(r + 1) * k];
            let lse = kernels::log_sum_exp(row);
            probs.extend(row.iter().map(|&v| (v as f64 - lse).exp() as f32));
            let w = class_weights.map_or(1.0, |w| w[label] as f64);
            total += w * (lse - row[label] as f64);
            norm += w;
        }
        let loss = if norm > 0.0 { total / norm } else { 0.0 };
        let value = Tensor::scalar(loss as f32);
        Ok(self.record(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: class_weights.map(<[f32]>::to_vec),
                probs,
            },
        ))
    }

    /// Selects rows of `x` (viewed as `[N, width]` with `width = shape[1..]`)
    /// and returns a tensor of shape `out_shape`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize], out_shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        let n = xs.first().copied().unwrap_or(0);
        let width: usize = xs[1..].iter().product();
        if out_shape.iter().product::<usize>() != idx.len() * width {
            return Err(Error::Dimension(format!(
                "gather of {} rows of width {width} into {out_shape:?}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("row {bad} out of range for {n} rows")));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&xv[i * width..(i + 1) * width]);
        }
        let value = Tensor::new(out_shape.to_vec(), data)?;
        Ok(self.record(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Dimension(format!(
                "invalid permutation {axes:?} for shape {shape:?}"
            )));
        }
        let (data, out_shape) = kernels::permute(self.value(x).data(), shape, axes);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.record(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.record(value, Op::Reshape { x }))
    }

    /// `[a×n×c] → [a×c]`, averaging over the middle axis.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let (a, n, c) = self.value(x).dims3()?;
        let xv = self.value(x).data();
        let mut data = vec![0.0f32; a * c];
        for i in 0..a {
            for j in 0..c {
                let s: f64 = (0..n).map(|t| xv[(i * n + t) * c + j] as f64).sum();
                data[i * c + j] = (s / n.max(1) as f64) as f32;
            }
        }
        let value = Tensor::new(vec![a, c], data)?;
        Ok(self.record(value, Op::MeanAxis1 { x }))
    }

    // ---- backward ---------------------------------------------------------

    /// Back-propagates from a scalar `loss`, seeding its gradient with 1.
    /// Gradients accumulate on every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Back-propagates an explicit upstream gradient for `out`.
    pub fn backward_with(&mut self, out: Var, seed: Vec<f32>) -> Result<()> {
        if seed.len() != self.value(out).numel() {
            return Err(Error::Dimension("seed gradient length".into()));
        }
        if !self.nodes[out.0].requires_grad {
            return Ok(());
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[out.0].grad = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_vjp(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contributions {
                self.accumulate(v, c);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f32>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib),
        }
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn node_vjp(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, val(*b).data(), true, &mut da, false);
                    out.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a).data(), true, g, false, &mut db, false);
                    out.push((*b, db));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (batch, m, k) = (val(*a).shape()[0], val(*a).shape()[1], val(*a).shape()[2]);
                let n = if *trans_b { val(*b).shape()[1] } else { val(*b).shape()[2] };
                let av = val(*a).data();
                let bv = val(*b).data();
                if wants(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &bv[t * k * n..(t + 1) * k * n];
                        // out = a·b  → da = g·bᵀ ; out = a·bᵀ → da = g·b
                        kernels::gemm(m, n, k, gt, false, bt, !*trans_b, &mut da[t * m * k..(t + 1) * m * k], false);
                    }
                    out.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &av[t * m * k..(t + 1) * m * k];
                        let dbt = &mut db[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            // b stored [n×k]: db = gᵀ·a
                            kernels::gemm(n, m, k, gt, true, at, false, dbt, false);
                        } else {
                            kernels::gemm(k, m, n, at, true, gt, false, dbt, false);
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if wants(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::AddBroadcast { a, b } => {
                if wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if wants(*b) {
                    let period = val(*b).numel();
                    let mut acc = vec![0.0f64; period];
                    if period > 0 {
                        for chunk in g.chunks_exact(period) {
                            acc.iter_mut().zip(chunk).for_each(|(s, &v)| *s += v as f64);
                        }
                    }
                    out.push((*b, acc.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::Scale { a, s } => {
                if wants(*a) {
                    out.push((*a, g.iter().map(|v| v * s).collect()));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = val(*x).data();
                let gm = val(*gamma).data();
                let d = gm.len();
                let rows = mean.len();
                let mut dx = vec![0.0f32; xv.len()];
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                let mut xhat = vec![0.0f64; d];
                let mut dxhat = vec![0.0f64; d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mu, rs) = (mean[r] as f64, rstd[r] as f64);
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        xhat[j] = (row[j] as f64 - mu) * rs;
                        dxhat[j] = gr[j] as f64 * gm[j] as f64;
                        dgamma[j] += gr[j] as f64 * xhat[j];
                        dbeta[j] += gr[j] as f64;
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                    for j in 0..d {
                        dx[r * d + j] = (rs * (dxhat[j] - m1 - xhat[j] * m2)) as f32;
                    }
                }
                if wants(*x) {
                    out.push((*x, dx));
                }
                if wants(*gamma) {
                    out.push((*gamma, dgamma.into_iter().map(|v| v as f32).collect()));
                }
                if wants(*beta) {
                    out.push((*beta, dbeta.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::Gelu { x } => {
                if wants(*x) {
                    let dx = val(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| gv * kernels::gelu_grad_scalar(v))
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Softmax { x } => {
                if wants(*x) {
                    let y = self.nodes[i].value.data();
                    let n = self.nodes[i].value.last_dim();
                    let mut dx = vec![0.0f32; y.len()];
                    for ((yr, gr), dr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                        for j in 0..n {
                            dr[j] = (yr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                if wants(*logits) {
                    let k = val(*logits).shape()[1];
                    let norm: f64 = match weights {
                        Some(w) => labels.iter().map(|&l| w[l] as f64).sum(),
                        None => labels.len() as f64,
                    };
                    let scale = if norm > 0.0 { g[0] as f64 / norm } else { 0.0 };
                    let mut dl = vec![0.0f32; probs.len()];
                    for (r, &label) in labels.iter().enumerate() {
                        let w = weights.as_ref().map_or(1.0, |w| w[label] as f64);
                        for j in 0..k {
                            let target = if j == label { 1.0 } else { 0.0 };
                            dl[r * k + j] = (scale * w * (probs[r * k + j] as f64 - target)) as f32;
                        }
                    }
                    out.push((*logits, dl));
                }
            }
            Op::GatherRows { x, idx } => {
                if wants(*x) {
                    let xv = val(*x);
                    let n = xv.shape()[0];
                    let width = if n == 0 { 0 } else { xv.numel() / n };
                    let mut dx = vec![0.0f32; xv.numel()];
                    for (o, &src) in idx.iter().enumerate() {
                        let dst = &mut dx[src * width..(src + 1) * width];
                        dst.iter_mut()
                            .zip(&g[o * width..(o + 1) * width])
                            .for_each(|(a, b)| *a += b);
                    }
                    out.push((*x, dx));
                }
            }
            Op::Permute { x, axes } => {
                if wants(*x) {
                    let (dx, _) = kernels::permute(g, self.nodes[i].value.shape(), &kernels::invert_axes(axes));
                    out.push((*x, dx));
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::MeanAxis1 { x } => {
                if wants(*x) {
                    let s = val(*x).shape();
                    let (a, n, c) = (s[0], s[1], s[2]);
                    let inv = 1.0 / n.max(1) as f32;
                    let mut dx = vec![0.0f32; a * n * c];
                    for ii in 0..a {
                        for t in 0..n {
                            for j in 0..c {
                                dx[(ii * n + t) * c + j] = g[ii * c + j] * inv;
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_preserve_construction_order() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_rows(&[&[1.0, 2.0]]));
        let b = g.param(Tensor::from_rows(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        let d = g.scale(c, 2.0).unwrap();
        let recs = g.records();
        assert_eq!(recs.len(), 4);
        for r in &recs {
            assert!(r.inputs.iter().all(|&i| i < r.output));
        }
        assert_eq!(recs[2].kind, "matmul");
        assert_eq!(g.value(d).data(), &[22.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn reused_input_accumulates() {
        // d/dx sum(x + x) = 2
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[&[1.0, -1.0]]));
        let y = g.add(x, x).unwrap();
        let w = g.constant(Tensor::from_rows(&[&[1.0], &[1.0]]));
        let s = g.matmul(y, w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn inference_graph_has_no_grads() {
        let mut g = Graph::inference();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.scale(x, 2.0).unwrap();
        assert!(!g.requires_grad(y));
        g.backward(y).unwrap();
        assert!(g.grad(x).is_none());
    }
}
