//! Reverse-mode autodiff over an append-only node arena.
//!
//! Every op appends a node holding its forward value and whatever it needs for
//! the backward pass. `backward` walks the arena from the output towards the
//! leaves; since nodes only reference earlier nodes, arena order is a
//! topological order.

use std::collections::BTreeMap;

use super::tensor::{gelu, gelu_grad, matmul_into, row_moments, softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a trainable parameter in a [`ParamSet`](crate::numerics::ParamSet).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f32>,
        rstd: Vec<f32>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f32>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
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

    /// Input tensor; tracked iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        self.push(t, Op::Leaf, tracked, None)
    }

    /// Constant that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false, None)
    }

    /// Registers a trainable parameter.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = self.tracked(inputs);
        self.push(value, op, tracked, None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.op(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.op(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.op(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a vector to every row (the one explicit broadcast).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        Ok(self.op(value, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let value = self.value(x).scale(c);
        self.op(value, Op::Scale(x, c), &[x])
    }

    /// Multiplies every element of `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.value(s).item()?;
        let value = self.value(x).scale(c);
        Ok(self.op(value, Op::ScaleBy(x, s), &[x, s]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f32::exp);
        self.op(value, Op::Exp(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.op(value, Op::Gelu(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.op(value, Op::Transpose(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).softmax_lastdim()?;
        Ok(self.op(value, Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Config(format!(
                "layer norm eps must be positive, got {eps}"
            )));
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != d || b.numel() != d {
            return Err(Error::shape("layer_norm", xv.shape(), g.shape()));
        }
        let mut normed = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = xv.clone();
        for (row, orow) in normed.chunks_mut(d).zip(out.data_mut().chunks_mut(d)) {
            let (mean, r) = row_moments(row, eps);
            rstd.push(r);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * r;
                orow[j] = *v * g.data()[j] + b.data()[j];
            }
        }
        let out = out.reshape(xv.shape())?;
        Ok(self.op(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Scales every row to unit L2 norm. A zero row is a numeric error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Numeric(format!(
                    "row {i} has norm {n}; cosine undefined"
                )));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let out = out.reshape(xv.shape())?;
        Ok(self.op(out, Op::NormalizeRows { x, norms }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        Ok(self.op(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if start + len > n {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv.data()[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(&[m, len], data)?;
        Ok(self.op(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        Ok(self.op(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let (m, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(&[m, total], data)?;
        Ok(self.op(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.op(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.op(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.numel() as f32);
        self.op(value, Op::Mean(x), &[x])
    }

    /// Sum over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let d = lv.last_dim();
        if targets.len() != lv.rows() || targets.iter().any(|&t| t >= d) {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if lv.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("NaN logits".into()));
        }
        let mut probs = lv.data().to_vec();
        // f64 accumulation makes the value independent of row and column order
        let mut total = 0.0f64;
        for (r, row) in probs.chunks_mut(d).enumerate() {
            let logits_row = &lv.data()[r * d..(r + 1) * d];
            let max = f64::from(logits_row.iter().copied().fold(f32::NEG_INFINITY, f32::max));
            let lse = max
                + logits_row
                    .iter()
                    .map(|&v| (f64::from(v) - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - f64::from(logits_row[targets[r]]);
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total as f32);
        Ok(self.op(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Gradients of a scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.backward_with(loss, Tensor::new(lv.shape(), vec![1.0])?)
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`) back to the leaves.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::shape(
                "backward seed",
                self.value(out).shape(),
                seed.shape(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(out.0 + 1) {
            if let Some(id) = node.param {
                let g = grads[idx]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match params.get_mut(&id) {
                    Some(acc) => *acc = acc.add(&g)?,
                    None => {
                        params.insert(id, g);
                    }
                }
            }
        }
        // parameters registered after `out` cannot influence it
        for node in self.nodes.iter().skip(out.0 + 1) {
            if let Some(id) = node.param {
                params
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].tracked {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.reshape(self.value(v).shape())?),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                if self.nodes[a.0].tracked {
                    let bt = bv.transpose()?;
                    let mut da = vec![0.0; m * k];
                    matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], da)?)?;
                }
                if self.nodes[b.0].tracked {
                    let at = av.transpose()?;
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut db, k, m, n);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], db)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                let ga = g.mul(self.value(*b))?;
                let gb = g.mul(self.value(*a))?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone())?;
                let d = g.last_dim();
                let mut db = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                let shape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::new(&shape, db)?)?;
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scale(*c))?,
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).item()?;
                self.accumulate(grads, *x, g.scale(c))?;
                let ds: f32 = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(a, b)| a * b)
                    .sum();
                let shape = self.value(*s).shape().to_vec();
                self.accumulate(grads, *s, Tensor::new(&shape, vec![ds])?)?;
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.mul(&node.value)?)?,
            Op::Gelu(x) => {
                let dx = self.value(*x).map(gelu_grad).mul(g)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?)?,
            Op::Softmax(x) => {
                let d = g.last_dim();
                let mut dx = g.data().to_vec();
                for (row, y) in dx.chunks_mut(d).zip(node.value.data().chunks(d)) {
                    let dot: f32 = row.iter().zip(y).map(|(a, b)| a * b).sum();
                    for (r, &yv) in row.iter_mut().zip(y) {
                        *r = yv * (*r - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape(), dx)?)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let d = g.last_dim();
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; g.numel()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (r, ((grow, xhat), dxrow)) in g
                    .data()
                    .chunks(d)
                    .zip(normed.chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxhat = grow[j] * gv[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat[j];
                        dg[j] += grow[j] * xhat[j];
                        db[j] += grow[j];
                    }
                    mean_dxhat /= d as f32;
                    mean_dxhat_xhat /= d as f32;
                    for j in 0..d {
                        let dxhat = grow[j] * gv[j];
                        dxrow[j] = rstd[r] * (dxhat - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape(), dx)?)?;
                let gshape = self.value(*gain).shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *gain, Tensor::new(&gshape, dg)?)?;
                self.accumulate(grads, *bias, Tensor::new(&bshape, db)?)?;
            }
            Op::NormalizeRows { x, norms } => {
                let d = g.last_dim();
                let mut dx = vec![0.0; g.numel()];
                for (((grow, y), dxrow), &n) in g
                    .data()
                    .chunks(d)
                    .zip(node.value.data().chunks(d))
                    .zip(dx.chunks_mut(d))
                    .zip(norms)
                {
                    let dot: f32 = grow.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dxrow[j] = (grow[j] - y[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape(), dx)?)?;
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let mut dx = Tensor::zeros(xv.shape());
                dx.data_mut()[start * d..start * d + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, dx)?;
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (m, n) = xv.dims2()?;
                let (_, len) = g.dims2()?;
                let mut dx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    dx.data_mut()[i * n + start..i * n + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let shape = self.value(p).shape().to_vec();
                    let piece = Tensor::new(&shape, g.data()[offset..offset + n].to_vec())?;
                    self.accumulate(grads, p, piece)?;
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims2()?;
                let mut col = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    let mut piece = Vec::with_capacity(m * w);
                    for i in 0..m {
                        piece.extend_from_slice(&g.data()[i * total + col..i * total + col + w]);
                    }
                    self.accumulate(grads, p, Tensor::new(&[m, w], piece)?)?;
                    col += w;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?)?;
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()?))?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let shape = xv.shape().to_vec();
                let v = g.item()? / xv.numel() as f32;
                self.accumulate(grads, *x, Tensor::full(&shape, v))?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let gs = g.item()?;
                let lv = self.value(*logits);
                let d = lv.last_dim();
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * d + t] -= 1.0;
                }
                for v in dl.iter_mut() {
                    *v *= gs;
                }
                let shape = lv.shape().to_vec();
                self.accumulate(grads, *logits, Tensor::new(&shape, dl)?)?;
            }
        }
        Ok(())
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of a node, if it participated.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a registered parameter; zero-filled when it did not participate.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}
