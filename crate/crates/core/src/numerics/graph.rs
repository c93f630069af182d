//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so parents always precede
//! children and the tape is acyclic by construction. `backward` walks it in
//! reverse once.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::ParamSet;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, b: Var },
    AddChannelBias { x: Var, b: Var },
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: Var, g: Var, b: Var, xhat: Vec<T>, rstd: Vec<T>, frozen: bool },
    Gather { src: Var, idx: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    CrossEntropy { logits: Var, labels: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    BceLogits { logits: Var, targets: Vec<T> },
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, k: Var, geom: ConvGeom, cols: Vec<T> },
    ConvTranspose { y: Var, k: Var, geom: ConvGeom },
    GinAggregate { x: Var, nbrs: Vec<Vec<usize>>, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<'p, T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamSet<T>>,
    param_vars: HashMap<usize, Var>,
    batch_stats: Vec<(String, BatchStats<T>)>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(lhs: &[usize], rhs: &[usize], context: &'static str) -> Error {
    Error::Shape {
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
        context,
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
            batch_stats: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamSet<T>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf not tied to a parameter set.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a named parameter; repeated lookups return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let params = self
            .params
            .ok_or_else(|| Error::contract("graph has no parameter set"))?;
        let id = params
            .id(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let t = params.by_id(id).clone();
        let v = if params.is_trainable(id) {
            self.input(t)
        } else {
            self.constant(t)
        };
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn param_exists(&self, name: &str) -> bool {
        self.params.and_then(|p| p.id(name)).is_some()
    }

    pub fn batch_stats(&self) -> &[(String, BatchStats<T>)] {
        &self.batch_stats
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        self.value(v).as_matrix_dims()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err(sa, sb, "matmul expects rank-2 operands"));
        }
        let (ar, ac) = (sa[0], sa[1]);
        let (br, bc) = (sb[0], sb[1]);
        let inner_a = if ta { ar } else { ac };
        let inner_b = if tb { bc } else { br };
        if inner_a != inner_b {
            return Err(shape_err(sa, sb, "matmul inner dimensions"));
        }
        let m = if ta { ac } else { ar };
        let n = if tb { br } else { bc };
        let out = kernels::mm(
            self.value(a).data(),
            (ar, ac),
            ta,
            self.value(b).data(),
            (br, bc),
            tb,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(self.shape(a), self.shape(b), "elementwise"));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a last-axis vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = self.dims2(x);
        if self.value(b).numel() != cols {
            return Err(shape_err(self.shape(x), self.shape(b), "bias length"));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(cols) {
            row.iter_mut().zip(&bias).for_each(|(v, &c)| *v += c);
        }
        Ok(self.push(out, Op::AddBias { x, b }, &[x, b]))
    }

    /// Adds one scalar per channel to a `C×H×W` tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || self.value(b).numel() != s[0] {
            return Err(shape_err(s, self.shape(b), "channel bias"));
        }
        let plane = s[1] * s[2];
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bias[c]);
        }
        Ok(self.push(out, Op::AddChannelBias { x, b }, &[x, b]))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, cols) = self.dims2(a);
        let mut out = self.value(a).clone();
        kernels::softmax_rows_inplace(out.data_mut(), cols);
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: T) -> Result<Var> {
        let (_, cols) = self.dims2(x);
        if self.value(g).numel() != cols || self.value(b).numel() != cols {
            return Err(shape_err(self.shape(x), self.shape(g), "layer_norm affine"));
        }
        let stats = kernels::layer_norm_rows(self.value(x).data(), cols, eps);
        let mut out = stats.xhat.clone();
        kernels::apply_affine(&mut out, self.value(g).data(), self.value(b).data());
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                g,
                b,
                xhat: stats.xhat,
                rstd: stats.rstd,
            },
            &[x, g, b],
        ))
    }

    /// Training-mode batch normalization over rows (statistics per column).
    /// The batch statistics are recorded under `tag` for running averages.
    pub fn batch_norm(&mut self, x: Var, g: Var, b: Var, eps: T, tag: &str) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        if self.value(g).numel() != cols || self.value(b).numel() != cols {
            return Err(shape_err(self.shape(x), self.shape(g), "batch_norm affine"));
        }
        let src = self.value(x).data();
        let inv_n = T::one() / T::of(rows as f64);
        let mut mean = vec![T::zero(); cols];
        let mut var = vec![T::zero(); cols];
        for row in src.chunks(cols) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m *= inv_n);
        for row in src.chunks(cols) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s *= inv_n);
        let v = self.normalize_cols(x, g, b, &mean, &var, eps, false)?;
        self.batch_stats.push((tag.to_string(), BatchStats { mean, var }));
        Ok(v)
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_frozen(&mut self, x: Var, g: Var, b: Var, stats: &BatchStats<T>, eps: T) -> Result<Var> {
        let cols = self.dims2(x).1;
        if self.value(g).numel() != cols
            || self.value(b).numel() != cols
            || stats.mean.len() != cols
            || stats.var.len() != cols
        {
            return Err(shape_err(self.shape(x), self.shape(g), "batch_norm affine"));
        }
        self.normalize_cols(x, g, b, &stats.mean, &stats.var, eps, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize_cols(
        &mut self,
        x: Var,
        g: Var,
        b: Var,
        mean: &[T],
        var: &[T],
        eps: T,
        frozen: bool,
    ) -> Result<Var> {
        let cols = mean.len();
        let rstd: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let mut xhat = self.value(x).data().to_vec();
        for row in xhat.chunks_mut(cols) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) * rstd[j];
            }
        }
        let mut out = xhat.clone();
        kernels::apply_affine(&mut out, self.value(g).data(), self.value(b).data());
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::BatchNorm { x, g, b, xhat, rstd, frozen }, &[x, g, b]))
    }

    /// Row gather: `out[i] = src[idx[i]]`.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!("gather index {bad} >= {rows} rows")));
        }
        if idx.is_empty() {
            return Err(Error::contract("gather with no indices"));
        }
        let s = self.value(src).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&s[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(vec![idx.len(), cols], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
            &[src],
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a);
        if start + len > cols || len == 0 {
            return Err(shape_err(self.shape(a), &[start, len], "slice_cols"));
        }
        let s = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&s[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(t, Op::SliceCols { a, start }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims2(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p);
            if r != rows {
                return Err(shape_err(self.shape(parts[0]), self.shape(p), "concat_cols"));
            }
            total += c;
        }
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.dims2(p);
            let s = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(&s[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Mean cross-entropy over rows with a label; `None` rows are ignored.
    /// Returns a zero loss when no row is labelled.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.dims2(logits);
        if labels.len() != rows {
            return Err(shape_err(self.shape(logits), &[labels.len()], "cross_entropy labels"));
        }
        let mut probs = self.value(logits).data().to_vec();
        kernels::softmax_rows_inplace(&mut probs, cols);
        let mut loss = T::zero();
        let mut count = 0;
        for (r, l) in labels.iter().enumerate() {
            if let Some(c) = *l {
                if c >= cols {
                    return Err(Error::contract(format!("label {c} >= {cols} classes")));
                }
                loss -= probs[r * cols + c].max(T::min_positive_value()).ln();
                count += 1;
            }
        }
        if count > 0 {
            loss /= T::of(count as f64);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(shape_err(self.shape(logits), &[targets.len()], "bce targets"));
        }
        let mut loss = T::zero();
        for (&zi, &ti) in z.iter().zip(targets) {
            // max(z,0) - z t + ln(1 + e^{-|z|})
            let pos = if zi > T::zero() { zi } else { T::zero() };
            loss += pos - zi * ti + (T::one() + (-zi.abs()).exp()).ln();
        }
        loss /= T::of(z.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / T::of(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// 3×3 cross-correlation, padding 1, over a `C×H×W` input.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || ks[2] != 3 || ks[3] != 3 {
            return Err(shape_err(&xs, &ks, "conv2d"));
        }
        let geom = ConvGeom::for_input(xs[0], xs[1], xs[2], stride)?;
        let cols = geom.im2col(self.value(x).data());
        let npix = geom.ho * geom.wo;
        let out = kernels::mm(
            self.value(k).data(),
            (ks[0], xs[0] * 9),
            false,
            &cols,
            (xs[0] * 9, npix),
            false,
        );
        let t = Tensor::new(vec![ks[0], geom.ho, geom.wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, k, geom, cols }, &[x, k]))
    }

    /// Adjoint of [`Graph::conv2d`]; kernel is `C_in×C_out×3×3`.
    pub fn conv2d_transpose(&mut self, y: Var, k: Var, stride: usize) -> Result<Var> {
        let (ys, ks) = (self.shape(y).to_vec(), self.shape(k).to_vec());
        if ys.len() != 3 || ks.len() != 4 || ks[0] != ys[0] || ks[2] != 3 || ks[3] != 3 {
            return Err(shape_err(&ys, &ks, "conv2d_transpose"));
        }
        let c_out = ks[1];
        let geom = ConvGeom::for_input(c_out, ys[1] * stride, ys[2] * stride, stride)?;
        let cols = kernels::mm(
            self.value(k).data(),
            (ys[0], c_out * 9),
            true,
            self.value(y).data(),
            (ys[0], ys[1] * ys[2]),
            false,
        );
        let t = Tensor::new(vec![c_out, geom.h, geom.w], geom.col2im(&cols))?;
        Ok(self.push(t, Op::ConvTranspose { y, k, geom }, &[y, k]))
    }

    /// `out(v) = (1+eps)·x(v) + Σ_{w∈nbrs[v]} x(w)`. Neighbor lists must be
    /// symmetric for the backward pass to be the true adjoint.
    pub fn gin_aggregate(&mut self, x: Var, nbrs: &[Vec<usize>], eps: T) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        if nbrs.len() != rows {
            return Err(shape_err(self.shape(x), &[nbrs.len()], "gin neighbor lists"));
        }
        let out = gin_apply(self.value(x).data(), cols, nbrs, eps);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::GinAggregate {
                x,
                nbrs: nbrs.to_vec(),
                eps,
            },
            &[x],
        ))
    }

    /// Gradients of scalar `loss` w.r.t. every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            by_node: grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += *c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ar, ac, br, bc) = (sa[0], sa[1], sb[0], sb[1]);
                let m = if *ta { ac } else { ar };
                let n = if *tb { br } else { bc };
                if needs(*a) {
                    // dA' = G·op(B)^T ; dA = dA' or its transpose
                    let da = if !ta {
                        kernels::mm(g, (m, n), false, val(*b), (br, bc), !tb)
                    } else {
                        kernels::mm(val(*b), (br, bc), *tb, g, (m, n), true)
                    };
                    acc(*a, da);
                }
                if needs(*b) {
                    let db = if !tb {
                        kernels::mm(val(*a), (ar, ac), !ta, g, (m, n), false)
                    } else {
                        kernels::mm(g, (m, n), true, val(*a), (ar, ac), *ta)
                    };
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::AddBias { x, b } => {
                acc(*x, g.to_vec());
                if needs(*b) {
                    let cols = self.value(*b).numel();
                    let mut db = vec![T::zero(); cols];
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    acc(*b, db);
                }
            }
            Op::AddChannelBias { x, b } => {
                acc(*x, g.to_vec());
                if needs(*b) {
                    let s = self.shape(*x);
                    let plane = s[1] * s[2];
                    let db = g
                        .chunks(plane)
                        .map(|c| c.iter().fold(T::zero(), |a, &v| a + v))
                        .collect();
                    acc(*b, db);
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&v| v * *c).collect()),
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                    .collect(),
            ),
            Op::Gelu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| d * kernels::gelu_grad(x))
                    .collect(),
            ),
            Op::Sigmoid(a) => acc(
                *a,
                g.iter()
                    .zip(node.value.data())
                    .map(|(&d, &y)| d * y * (T::one() - y))
                    .collect(),
            ),
            Op::Softmax(a) => {
                let (_, cols) = node.value.as_matrix_dims();
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    for ((d, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = p * (q - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm { x, g: gam, b, xhat, rstd } => {
                let cols = self.value(*gam).numel();
                let gamma = val(*gam);
                if needs(*gam) || needs(*b) {
                    let mut dg = vec![T::zero(); cols];
                    let mut db = vec![T::zero(); cols];
                    for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    acc(*gam, dg);
                    acc(*b, db);
                }
                if needs(*x) {
                    let inv_n = T::one() / T::of(cols as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, ((dr, gr), xr)) in dx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..cols {
                            let dxh = gr[j] * gamma[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 *= inv_n;
                        m2 *= inv_n;
                        for j in 0..cols {
                            dr[j] = rstd[r] * (gr[j] * gamma[j] - m1 - xr[j] * m2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::BatchNorm { x, g: gam, b, xhat, rstd, frozen } => {
                let cols = self.value(*gam).numel();
                let rows = g.len() / cols;
                let gamma = val(*gam);
                let mut dg = vec![T::zero(); cols];
                let mut db = vec![T::zero(); cols];
                let mut m2 = vec![T::zero(); cols];
                for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for j in 0..cols {
                        dg[j] += gr[j] * xr[j];
                        db[j] += gr[j];
                    }
                }
                if needs(*x) && *frozen {
                    let mut dx = g.to_vec();
                    for dr in dx.chunks_mut(cols) {
                        for j in 0..cols {
                            dr[j] *= rstd[j] * gamma[j];
                        }
                    }
                    acc(*x, dx);
                } else if needs(*x) {
                    let inv_n = T::one() / T::of(rows as f64);
                    for j in 0..cols {
                        m2[j] = dg[j] * gamma[j] * inv_n;
                    }
                    let m1: Vec<T> = (0..cols).map(|j| db[j] * gamma[j] * inv_n).collect();
                    let mut dx = vec![T::zero(); g.len()];
                    for ((dr, gr), xr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            dr[j] = rstd[j] * (gr[j] * gamma[j] - m1[j] - xr[j] * m2[j]);
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gam, dg);
                acc(*b, db);
            }
            Op::Gather { src, idx } => {
                let cols = self.value(*src).as_matrix_dims().1;
                let mut ds = vec![T::zero(); self.value(*src).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    ds[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(d, &v)| *d += v);
                }
                acc(*src, ds);
            }
            Op::SliceCols { a, start } => {
                let (rows, cols) = self.dims2(*a);
                let len = node.value.as_matrix_dims().1;
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*a, da);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.as_matrix_dims();
                let mut off = 0;
                for &p in parts {
                    let c = self.dims2(p).1;
                    if needs(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        acc(p, dp);
                    }
                    off += c;
                }
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                let cols = self.dims2(*logits).1;
                let mut d = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let scale = g[0] / T::of(*count as f64);
                    for (r, l) in labels.iter().enumerate() {
                        if let Some(c) = *l {
                            for j in 0..cols {
                                d[r * cols + j] = probs[r * cols + j] * scale;
                            }
                            d[r * cols + c] -= scale;
                        }
                    }
                }
                acc(*logits, d);
            }
            Op::BceLogits { logits, targets } => {
                let scale = g[0] / T::of(targets.len() as f64);
                let d = val(*logits)
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| (kernels::sigmoid(z) - t) * scale)
                    .collect();
                acc(*logits, d);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Conv2d { x, k, geom, cols } => {
                let c_out = self.shape(*k)[0];
                let npix = geom.ho * geom.wo;
                let prows = geom.c_in * 9;
                if needs(*k) {
                    acc(*k, kernels::mm(g, (c_out, npix), false, cols, (prows, npix), true));
                }
                if needs(*x) {
                    let dcols = kernels::mm(val(*k), (c_out, prows), true, g, (c_out, npix), false);
                    acc(*x, geom.col2im(&dcols));
                }
            }
            Op::ConvTranspose { y, k, geom } => {
                let c_y = self.shape(*y)[0];
                let npix = geom.ho * geom.wo;
                let prows = geom.c_in * 9;
                let gcols = geom.im2col(g);
                if needs(*y) {
                    acc(*y, kernels::mm(val(*k), (c_y, prows), false, &gcols, (prows, npix), false));
                }
                if needs(*k) {
                    acc(*k, kernels::mm(val(*y), (c_y, npix), false, &gcols, (prows, npix), true));
                }
            }
            Op::GinAggregate { x, nbrs, eps } => {
                let cols = self.dims2(*x).1;
                acc(*x, gin_apply(g, cols, nbrs, *eps));
            }
        }
    }
}

pub(crate) fn gin_apply<T: Scalar>(x: &[T], cols: usize, nbrs: &[Vec<usize>], eps: T) -> Vec<T> {
    let self_w = T::one() + eps;
    let mut out: Vec<T> = x.iter().map(|&v| v * self_w).collect();
    for (v, ns) in nbrs.iter().enumerate() {
        for &w in ns {
            for j in 0..cols {
                out[v * cols + j] += x[w * cols + j];
            }
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Vec<T>>>,
    param_vars: HashMap<usize, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. `v`; zero-filled if `v` does not influence the loss.
    pub fn wrt(&self, graph: &Graph<'_, T>, v: Var) -> Tensor<T> {
        match &self.by_node[v.0] {
            Some(g) => Tensor::new(graph.shape(v).to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(graph.shape(v).to_vec()),
        }
    }

    /// Gradients keyed by parameter id. Parameters that were not touched by
    /// the forward pass are absent.
    pub fn into_param_grads(mut self) -> Vec<(usize, Vec<T>)> {
        let mut out: Vec<(usize, Vec<T>)> = self
            .param_vars
            .iter()
            .filter_map(|(&pid, v)| self.by_node[v.0].take().map(|g| (pid, g)))
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[6.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(2.0));
        let unused = g.input(Tensor::new([2], vec![1.0, 1.0]).unwrap());
        let y = g.scale(x, 4.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(&g, unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros([2, 3]));
        let b = g.input(Tensor::zeros([2, 3]));
        let e = g.matmul(a, b).unwrap_err().to_string();
        assert!(e.contains("[2, 3]"));
    }

    #[test]
    fn repeated_param_lookup_shares_node() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("w", Tensor::scalar(1.0));
        let mut g = Graph::with_params(&ps);
        let a = g.param("w").unwrap();
        let b = g.param("w").unwrap();
        assert_eq!(a, b);
        let y = g.add(a, b).unwrap();
        let grads = g.backward(y).unwrap().into_param_grads();
        assert_eq!(grads, vec![(0, vec![2.0])]);
    }
}
