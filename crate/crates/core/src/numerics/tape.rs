//! Reverse-mode autodiff over a recorded operation tape.
//!
//! Every operation appends a node holding its output value and backward
//! rule. Nodes are created in topological order by construction, so the
//! backward pass is a single reverse sweep. Tensors on the tape are never
//! mutated in place; gradients accumulate additively when a value feeds
//! several consumers.

use crate::error::{Error, Result};

use super::kernels::{mm_nn, mm_nt, mm_tn, softmax_rows};
use super::tensor::{broadcast_shape, lit, Scalar, Tensor};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Layer-norm epsilon used everywhere normalization appears.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Gelu(Var),
    Matmul(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
    },
    RmsNorm {
        x: Var,
        gamma: Option<Var>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: T,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires: bool,
    /// Attention keeps its softmax weights for the backward pass.
    saved: Option<Tensor<T>>,
}

/// Recorded computation: values plus backward rules.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        self.push_saved(value, op, requires, None)
    }

    fn push_saved(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        requires: bool,
        saved: Option<Tensor<T>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: participates in the forward pass only.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input: receives a gradient from backward().
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn req2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].requires || self.nodes[b.0].requires
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).broadcast_zip(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), self.req2(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).broadcast_zip(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), self.req2(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).broadcast_zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), self.req2(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let req = self.nodes[a.0].requires;
        self.push(value, Op::Scale(a, c), req)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(silu_fwd);
        let req = self.nodes[a.0].requires;
        self.push(value, Op::Silu(a), req)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_fwd);
        let req = self.nodes[a.0].requires;
        self.push(value, Op::Gelu(a), req)
    }

    /// Matrix product with optional broadcast leading batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_fwd(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b), self.req2(a, b)))
    }

    /// Layer normalization over the last axis, optional affine params.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let value = layer_norm_fwd(self.value(x), gamma.map(|g| self.value(g)), beta.map(|b| self.value(b)))?;
        let mut req = self.nodes[x.0].requires;
        for v in gamma.iter().chain(beta.iter()) {
            req |= self.nodes[v.0].requires;
        }
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta }, req))
    }

    /// RMS normalization over the last axis, optional gain.
    pub fn rms_norm(&mut self, x: Var, gamma: Option<Var>) -> Result<Var> {
        let value = rms_norm_fwd(self.value(x), gamma.map(|g| self.value(g)))?;
        let mut req = self.nodes[x.0].requires;
        if let Some(g) = gamma {
            req |= self.nodes[g.0].requires;
        }
        Ok(self.push(value, Op::RmsNorm { x, gamma }, req))
    }

    /// Softmax attention over [heads, tokens, head_dim] inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: T) -> Result<Var> {
        let (value, weights) = attention_fwd(self.value(q), self.value(k), self.value(v), scale)?;
        let req = self.req2(q, k) || self.nodes[v.0].requires;
        Ok(self.push_saved(
            value,
            Op::Attention { q, k, v, scale },
            req,
            Some(weights),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let req = self.nodes[a.0].requires;
        self.push(Tensor::scalar(s), Op::Sum(a), req)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = lit::<T>(self.value(a).numel() as f64);
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let req = self.nodes[a.0].requires;
        self.push(Tensor::scalar(s / n), Op::Mean(a), req)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let req = self.nodes[a.0].requires;
        Ok(self.push(value, Op::Reshape(a), req))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        let req = self.nodes[a.0].requires;
        Ok(self.push(
            value,
            Op::Permute {
                x: a,
                axes: axes.to_vec(),
            },
            req,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let req = parts.iter().any(|&p| self.nodes[p.0].requires);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            req,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice(axis, start, len)?;
        let req = self.nodes[a.0].requires;
        Ok(self.push(value, Op::Slice { x: a, axis, start }, req))
    }

    /// Mean squared error between two vars: mean((a - b)^2).
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar loss. Every `param` leaf that the loss
    /// depends on receives a gradient; leaves off the path read back as zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients<'_, T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![T::one()],
        )?);
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires {
                continue;
            }
            let grad = grads[idx].take().unwrap();
            self.step_backward(idx, &grad, &mut grads)?;
            grads[idx] = Some(grad);
        }
        Ok(Gradients { tape: self, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv = *gv + *dv;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn step_backward(
        &self,
        idx: usize,
        grad: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let da = grad.reduce_to(self.value(*a).shape())?;
                let db = grad.reduce_to(self.value(*b).shape())?;
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Sub(a, b) => {
                let da = grad.reduce_to(self.value(*a).shape())?;
                let db = grad.map(|v| -v).reduce_to(self.value(*b).shape())?;
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Mul(a, b) => {
                let da = grad
                    .broadcast_zip(self.value(*b), |g, bv| g * bv)?
                    .reduce_to(self.value(*a).shape())?;
                let db = grad
                    .broadcast_zip(self.value(*a), |g, av| g * av)?
                    .reduce_to(self.value(*b).shape())?;
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, grad.map(|g| g * c));
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let da = Tensor::new(
                    x.shape().to_vec(),
                    x.data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&xv, &g)| g * silu_bwd(xv))
                        .collect(),
                )?;
                self.accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let da = Tensor::new(
                    x.shape().to_vec(),
                    x.data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&xv, &g)| g * gelu_bwd(xv))
                        .collect(),
                )?;
                self.accumulate(grads, *a, da);
            }
            Op::Matmul(a, b) => {
                let (da, db) = matmul_bwd(self.value(*a), self.value(*b), grad)?;
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (dx, dg, dbeta) = layer_norm_bwd(
                    self.value(*x),
                    gamma.map(|g| self.value(g)),
                    grad,
                )?;
                self.accumulate(grads, *x, dx);
                if let (Some(g), Some(dg)) = (gamma, dg) {
                    self.accumulate(grads, *g, dg);
                }
                if let (Some(b), Some(db)) = (beta, dbeta) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::RmsNorm { x, gamma } => {
                let (dx, dg) = rms_norm_bwd(self.value(*x), gamma.map(|g| self.value(g)), grad)?;
                self.accumulate(grads, *x, dx);
                if let (Some(g), Some(dg)) = (gamma, dg) {
                    self.accumulate(grads, *g, dg);
                }
            }
            Op::Attention { q, k, v, scale } => {
                let weights = self.nodes[idx]
                    .saved
                    .as_ref()
                    .expect("attention node keeps its weights");
                let (dq, dk, dv) = attention_bwd(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    weights,
                    grad,
                    *scale,
                )?;
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Sum(a) => {
                let g = grad.item()?;
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), g));
            }
            Op::Mean(a) => {
                let g = grad.item()? / lit::<T>(self.value(*a).numel() as f64);
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), g));
            }
            Op::Reshape(a) => {
                let da = grad.reshape(self.value(*a).shape())?;
                self.accumulate(grads, *a, da);
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let da = grad.permute(&inverse)?;
                self.accumulate(grads, *x, da);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0usize;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    let dp = grad.slice(*axis, start, len)?;
                    self.accumulate(grads, p, dp);
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                // scatter the slice gradient back into a zero tensor
                let xshape = self.value(*x).shape().to_vec();
                let mut dx = Tensor::zeros(&xshape);
                let len = grad.shape()[*axis];
                let outer: usize = xshape[..*axis].iter().product();
                let inner: usize = xshape[*axis + 1..].iter().product();
                for o in 0..outer {
                    let dst_base = o * xshape[*axis] * inner + start * inner;
                    let src_base = o * len * inner;
                    dx.data_mut()[dst_base..dst_base + len * inner]
                        .copy_from_slice(&grad.data()[src_base..src_base + len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

/// Gradient map produced by [`Tape::backward`].
pub struct Gradients<'a, T> {
    tape: &'a Tape<T>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<'_, T> {
    /// Gradient of the loss w.r.t. `v`; zeros when the loss does not depend
    /// on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.index()] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.tape.value(v).shape()),
        }
    }

    pub fn wrt_ref(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.index()].as_ref()
    }
}

fn silu_fwd<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp_inner())
}

fn silu_bwd<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp_inner());
    s * (T::one() + x * (T::one() - s))
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = lit::<T>(0.7978845608028654); // sqrt(2/pi)
    let a = lit::<T>(0.044715);
    let u = c * (x + a * x * x * x);
    lit::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = lit::<T>(0.7978845608028654);
    let a = lit::<T>(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    let du = c * (T::one() + lit::<T>(3.0) * a * x * x);
    lit::<T>(0.5) * (T::one() + t) + lit::<T>(0.5) * x * sech2 * du
}

fn matmul_fwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::shape(format!(
            "matmul needs rank >= 2 operands, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, ka) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (kb, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let lead_a = &a.shape()[..a.rank() - 2];
    let lead_b = &b.shape()[..b.rank() - 2];
    let lead = broadcast_shape(lead_a, lead_b)?;
    let batches: usize = lead.iter().product::<usize>().max(1);
    let mut out_shape = lead.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![T::zero(); batches * m * n];
    for bi in 0..batches {
        let ai = broadcast_batch_offset(bi, &lead, lead_a);
        let bj = broadcast_batch_offset(bi, &lead, lead_b);
        mm_nn(
            &a.data()[ai * m * ka..(ai + 1) * m * ka],
            &b.data()[bj * ka * n..(bj + 1) * ka * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            ka,
            n,
        );
    }
    Tensor::new(out_shape, out)
}

fn matmul_bwd<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let n = b.shape()[b.rank() - 1];
    let lead_a = &a.shape()[..a.rank() - 2];
    let lead_b = &b.shape()[..b.rank() - 2];
    let lead = broadcast_shape(lead_a, lead_b)?;
    let batches: usize = lead.iter().product::<usize>().max(1);
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for bi in 0..batches {
        let ai = broadcast_batch_offset(bi, &lead, lead_a);
        let bj = broadcast_batch_offset(bi, &lead, lead_b);
        let g = &grad.data()[bi * m * n..(bi + 1) * m * n];
        // dA += dC * B^T
        mm_nt(
            g,
            &b.data()[bj * k * n..(bj + 1) * k * n],
            &mut da.data_mut()[ai * m * k..(ai + 1) * m * k],
            m,
            n,
            k,
        );
        // dB += A^T * dC
        mm_tn(
            &a.data()[ai * m * k..(ai + 1) * m * k],
            g,
            &mut db.data_mut()[bj * k * n..(bj + 1) * k * n],
            m,
            k,
            n,
        );
    }
    Ok((da, db))
}

/// Flat batch offset of `out_batch` inside an input with leading dims
/// `in_lead` broadcast up to `lead`.
fn broadcast_batch_offset(out_batch: usize, lead: &[usize], in_lead: &[usize]) -> usize {
    if in_lead.is_empty() {
        return 0;
    }
    let mut rem = out_batch;
    let mut coords = vec![0usize; lead.len()];
    for d in (0..lead.len()).rev() {
        coords[d] = rem % lead[d];
        rem /= lead[d];
    }
    let pad = lead.len() - in_lead.len();
    let mut offset = 0usize;
    let mut stride = 1usize;
    for d in (0..in_lead.len()).rev() {
        let c = if in_lead[d] == 1 { 0 } else { coords[pad + d] };
        offset += c * stride;
        stride *= in_lead[d];
    }
    offset
}

fn check_affine_shape<T: Scalar>(x: &Tensor<T>, p: Option<&Tensor<T>>, what: &str) -> Result<()> {
    if let Some(p) = p {
        let c = *x.shape().last().unwrap();
        if p.shape() != [c] {
            return Err(Error::shape(format!(
                "{what} shape {:?} does not match channel extent {c}",
                p.shape()
            )));
        }
    }
    Ok(())
}

fn layer_norm_fwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: Option<&Tensor<T>>,
    beta: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("layer_norm on rank-0 tensor"))?;
    check_affine_shape(x, gamma, "layer_norm gamma")?;
    check_affine_shape(x, beta, "layer_norm beta")?;
    let rows = x.numel() / c;
    let eps = lit::<T>(NORM_EPS);
    let cn = lit::<T>(c as f64);
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / cn;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / cn;
        let rstd = T::one() / (var + eps).sqrt();
        let orow = &mut out[r * c..(r + 1) * c];
        for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
            let mut y = (v - mean) * rstd;
            if let Some(g) = gamma {
                y = y * g.data()[j];
            }
            if let Some(b) = beta {
                y = y + b.data()[j];
            }
            *o = y;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[allow(clippy::type_complexity)]
fn layer_norm_bwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: Option<&Tensor<T>>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let c = *x.shape().last().unwrap();
    let rows = x.numel() / c;
    let eps = lit::<T>(NORM_EPS);
    let cn = lit::<T>(c as f64);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let grow = &grad.data()[r * c..(r + 1) * c];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / cn;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / cn;
        let rstd = T::one() / (var + eps).sqrt();
        // y = normalized pre-affine value
        let mut sum_dyhat = T::zero();
        let mut sum_dyhat_y = T::zero();
        for j in 0..c {
            let y = (row[j] - mean) * rstd;
            let dyhat = match gamma {
                Some(g) => grow[j] * g.data()[j],
                None => grow[j],
            };
            dgamma[j] = dgamma[j] + grow[j] * y;
            dbeta[j] = dbeta[j] + grow[j];
            sum_dyhat = sum_dyhat + dyhat;
            sum_dyhat_y = sum_dyhat_y + dyhat * y;
        }
        let mean_dyhat = sum_dyhat / cn;
        let mean_dyhat_y = sum_dyhat_y / cn;
        let dxrow = &mut dx[r * c..(r + 1) * c];
        for (j, slot) in dxrow.iter_mut().enumerate() {
            let y = (row[j] - mean) * rstd;
            let dyhat = match gamma {
                Some(g) => grow[j] * g.data()[j],
                None => grow[j],
            };
            *slot = rstd * (dyhat - mean_dyhat - y * mean_dyhat_y);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Some(Tensor::new(vec![c], dgamma)?),
        Some(Tensor::new(vec![c], dbeta)?),
    ))
}

fn rms_norm_fwd<T: Scalar>(x: &Tensor<T>, gamma: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("rms_norm on rank-0 tensor"))?;
    check_affine_shape(x, gamma, "rms_norm gamma")?;
    let rows = x.numel() / c;
    let eps = lit::<T>(NORM_EPS);
    let cn = lit::<T>(c as f64);
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let ms = row.iter().fold(T::zero(), |a, &v| a + v * v) / cn;
        let rr = T::one() / (ms + eps).sqrt();
        for (j, (&v, o)) in row.iter().zip(out[r * c..(r + 1) * c].iter_mut()).enumerate() {
            let mut y = v * rr;
            if let Some(g) = gamma {
                y = y * g.data()[j];
            }
            *o = y;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn rms_norm_bwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: Option<&Tensor<T>>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let c = *x.shape().last().unwrap();
    let rows = x.numel() / c;
    let eps = lit::<T>(NORM_EPS);
    let cn = lit::<T>(c as f64);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); c];
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let grow = &grad.data()[r * c..(r + 1) * c];
        let ms = row.iter().fold(T::zero(), |a, &v| a + v * v) / cn;
        let rr = T::one() / (ms + eps).sqrt();
        let mut mean_dyhat_y = T::zero();
        for j in 0..c {
            let y = row[j] * rr;
            let dyhat = match gamma {
                Some(g) => grow[j] * g.data()[j],
                None => grow[j],
            };
            dgamma[j] = dgamma[j] + grow[j] * y;
            mean_dyhat_y = mean_dyhat_y + dyhat * y;
        }
        mean_dyhat_y = mean_dyhat_y / cn;
        for j in 0..c {
            let y = row[j] * rr;
            let dyhat = match gamma {
                Some(g) => grow[j] * g.data()[j],
                None => grow[j],
            };
            dx[r * c + j] = rr * (dyhat - y * mean_dyhat_y);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Some(Tensor::new(vec![c], dgamma)?),
    ))
}

fn attention_shapes<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
        return Err(Error::shape(
            "attention expects [heads, tokens, head_dim] inputs".to_string(),
        ));
    }
    let (h, tq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (hk, tk, dk) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    if v.shape() != [hk, tk, v.shape()[2]] || hk != h || dk != d || v.shape()[2] != d {
        return Err(Error::shape(format!(
            "attention head/head-dim mismatch: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok((h, tq, tk, d))
}

/// Transpose an [r, c] slice into `out` as [c, r].
fn transpose_into<T: Scalar>(src: &[T], out: &mut Vec<T>, r: usize, c: usize) {
    out.clear();
    out.reserve(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(src[i * c + j]);
        }
    }
}

fn attention_fwd<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, tq, tk, d) = attention_shapes(q, k, v)?;
    let mut weights = vec![T::zero(); h * tq * tk];
    let mut out = vec![T::zero(); h * tq * d];
    let mut kt = Vec::new();
    let mut qs = Vec::new();
    for head in 0..h {
        let qh = &q.data()[head * tq * d..(head + 1) * tq * d];
        let kh = &k.data()[head * tk * d..(head + 1) * tk * d];
        let vh = &v.data()[head * tk * d..(head + 1) * tk * d];
        let wh = &mut weights[head * tq * tk..(head + 1) * tq * tk];
        // scores = (scale * Q) * K^T, via mm_nn on a transposed K copy
        // (head_dim is short, so dot-product form would dominate the model)
        qs.clear();
        qs.extend(qh.iter().map(|&x| x * scale));
        transpose_into(kh, &mut kt, tk, d);
        mm_nn(&qs, &kt, wh, tq, d, tk);
        softmax_rows(wh, tq, tk);
        mm_nn(wh, vh, &mut out[head * tq * d..(head + 1) * tq * d], tq, tk, d);
    }
    Ok((
        Tensor::new(vec![h, tq, d], out)?,
        Tensor::new(vec![h, tq, tk], weights)?,
    ))
}

fn attention_bwd<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    weights: &Tensor<T>,
    grad: &Tensor<T>,
    scale: T,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (h, tq, tk, d) = attention_shapes(q, k, v)?;
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dweights = vec![T::zero(); tq * tk];
    let mut dscores = vec![T::zero(); tq * tk];
    let mut vt = Vec::new();
    for head in 0..h {
        let qh = &q.data()[head * tq * d..(head + 1) * tq * d];
        let kh = &k.data()[head * tk * d..(head + 1) * tk * d];
        let wh = &weights.data()[head * tq * tk..(head + 1) * tq * tk];
        let gh = &grad.data()[head * tq * d..(head + 1) * tq * d];
        // dV = A^T * dO
        mm_tn(
            wh,
            gh,
            &mut dv.data_mut()[head * tk * d..(head + 1) * tk * d],
            tq,
            tk,
            d,
        );
        // dA = dO * V^T (transposed copy, as in the forward pass)
        dweights.iter_mut().for_each(|x| *x = T::zero());
        transpose_into(
            &v.data()[head * tk * d..(head + 1) * tk * d],
            &mut vt,
            tk,
            d,
        );
        mm_nn(gh, &vt, &mut dweights, tq, d, tk);
        // softmax backward: dS = A .* (dA - rowsum(dA .* A))
        for r in 0..tq {
            let arow = &wh[r * tk..(r + 1) * tk];
            let darow = &dweights[r * tk..(r + 1) * tk];
            let dot = arow
                .iter()
                .zip(darow)
                .fold(T::zero(), |acc, (&a, &g)| acc + a * g);
            for j in 0..tk {
                dscores[r * tk + j] = arow[j] * (darow[j] - dot) * scale;
            }
        }
        // dQ = dS * K, dK = dS^T * Q
        mm_nn(
            &dscores,
            kh,
            &mut dq.data_mut()[head * tq * d..(head + 1) * tq * d],
            tq,
            tk,
            d,
        );
        mm_tn(
            &dscores,
            qh,
            &mut dk.data_mut()[head * tk * d..(head + 1) * tk * d],
            tq,
            tk,
            d,
        );
    }
    Ok((dq, dk, dv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_trivial() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap());
        let ones = tape.leaf(Tensor::ones(&[3]));
        let y = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn silu_of_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.silu(x);
        assert_eq!(tape.value(y).item().unwrap(), 0.0);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let eye = tape.leaf(Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap());
        let p = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);

        let b = tape.leaf(Tensor::new(vec![2, 2], vec![1., 0., 0., 0.]).unwrap());
        let c = tape.leaf(Tensor::new(vec![2, 1], vec![0., 5.]).unwrap());
        let q = tape.matmul(b, c).unwrap();
        assert_eq!(tape.value(q).data(), &[0., 0.]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[4], 3.7));
        let y = tape.layer_norm(x, None, None).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn rms_norm_formula() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let y = tape.rms_norm(x, None).unwrap();
        let denom = (12.5f64 + NORM_EPS).sqrt();
        let got = tape.value(y).data();
        assert!((got[0] - 3.0 / denom).abs() < 1e-12);
        assert!((got[1] - 4.0 / denom).abs() < 1e-12);
    }

    #[test]
    fn attention_single_token_returns_v() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Tensor::new(vec![1, 1, 2], vec![0.3, -0.7]).unwrap());
        let k = tape.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
        let v = tape.leaf(Tensor::new(vec![1, 1, 2], vec![5.0, -3.0]).unwrap());
        let o = tape.attention(q, k, v, 1.0 / (2.0f64).sqrt()).unwrap();
        assert_eq!(tape.value(o).data(), &[5.0, -3.0]);
    }

    #[test]
    fn attention_equal_logits_average_v() {
        // q orthogonal to every k: all logits zero -> uniform weights
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap());
        let k = tape.leaf(Tensor::new(vec![1, 3, 2], vec![0.0, 1.0, 0.0, 2.0, 0.0, -1.0]).unwrap());
        let v = tape.leaf(Tensor::new(vec![1, 3, 2], vec![3.0, 0.0, 0.0, 3.0, 3.0, 3.0]).unwrap());
        let o = tape.attention(q, k, v, 0.5).unwrap();
        for &x in tape.value(o).data() {
            assert!((x - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin()));
        let k = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.11).cos()));
        let v = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let o = tape.attention(q, k, v, 0.5).unwrap();
        let weights = tape.nodes[o.index()].saved.as_ref().unwrap();
        for r in 0..6 {
            let s: f64 = weights.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_zero_for_unused_leaf() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.param(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0]);
        let _ = x;
    }

    #[test]
    fn backward_accumulates_fanout_exactly() {
        // y = x + x => dy/dx = 2 exactly
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(1.5));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).item().unwrap(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::from_fn(&[4, 4], |i| (i as f32 * 0.31).sin()));
            let w = tape.leaf(Tensor::from_fn(&[4, 4], |i| (i as f32 * 0.17).cos()));
            let h = tape.matmul(x, w).unwrap();
            let h = tape.gelu(h);
            let n = tape.layer_norm(h, None, None).unwrap();
            tape.value(n).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
