//! Reverse-mode differentiation over a recorded tape.
//!
//! Nodes are appended in evaluation order, so a node's parents always carry
//! smaller ids and the reverse sweep is a simple descending scan.

use super::conv::{col2im_add, conv_out_extent, im2col};
use super::linalg::gemm;
use super::{Tensor, BN_EPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Pow(NodeId, f64),
    Log(NodeId),
    Exp(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f64),
    Clamp(NodeId, f64, f64),
    Min(NodeId, NodeId),
    Max(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumChannels(NodeId),
    Reshape(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Softmax(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceChannels {
        x: NodeId,
        start: usize,
    },
    BroadcastChannels(NodeId),
    ToTokens(NodeId),
    FromTokens(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// A single-threaded tape. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, t.shape(), &[0, 0, 0, 0])),
    }
}

/// (batch, rows, cols) view of a rank-2 or rank-3 tensor.
fn mat_dims(t: &Tensor) -> Option<(usize, usize, usize)> {
    match *t.shape() {
        [r, c] => Some((1, r, c)),
        [b, r, c] => Some((b, r, c)),
        _ => None,
    }
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
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: true,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Copies the value of `x` into a fresh constant leaf (stop-gradient).
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Per-channel batch mean and biased variance recorded by a training-mode
    /// batch-norm node.
    pub fn batch_norm_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.val(x).map(f);
        self.push(v, op, &[x])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        same_shape(name, self.val(a), self.val(b))?;
        let v = self.val(a).zip_map(self.val(b), f)?;
        Ok(self.push(v, op, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("min", a, b, Op::Min(a, b), |x, y| if x <= y { x } else { y })
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("max", a, b, Op::Max(a, b), |x, y| if x >= y { x } else { y })
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn add_scalar(&mut self, x: NodeId, k: f64) -> NodeId {
        self.unary(x, Op::Offset(x), |v| v + k)
    }

    /// `k - x`.
    pub fn rsub_scalar(&mut self, k: f64, x: NodeId) -> NodeId {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, k)
    }

    pub fn pow(&mut self, x: NodeId, p: f64) -> NodeId {
        self.unary(x, Op::Pow(x, p), |v| v.powf(p))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.val(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.val(x);
        let m = if t.is_empty() { 0.0 } else { t.sum() / t.len() as f64 };
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// (N, C, H, W) -> (N, 1, H, W) by summing over channels.
    pub fn sum_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = dims4("sum_channels", self.val(x))?;
        let plane = h * w;
        let src = self.val(x).data();
        let mut out = vec![0.0; n * plane];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for (o, v) in out[b * plane..(b + 1) * plane]
                    .iter_mut()
                    .zip(&src[base..base + plane])
                {
                    *o += v;
                }
            }
        }
        let v = Tensor::new(vec![n, 1, h, w], out)?;
        Ok(self.push(v, Op::SumChannels(x), &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let v = self.val(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Matrix product of rank-2 tensors, or batched product of rank-3 tensors.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.val(a), self.val(b));
        let err = || Error::shape("matmul", ta.shape(), tb.shape());
        let (ba, m, k) = mat_dims(ta).ok_or_else(err)?;
        let (bb, k2, n) = mat_dims(tb).ok_or_else(err)?;
        if ta.rank() != tb.rank() || ba != bb || k != k2 {
            return Err(err());
        }
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            gemm(
                false,
                false,
                m,
                n,
                k,
                1.0,
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = if ta.rank() == 2 {
            vec![m, n]
        } else {
            vec![ba, m, n]
        };
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.val(x);
        let (bn, r, c) =
            mat_dims(t).ok_or_else(|| Error::shape("transpose", t.shape(), &[0, 0]))?;
        let out = transpose_data(t.data(), bn, r, c);
        let shape = if t.rank() == 2 {
            vec![c, r]
        } else {
            vec![bn, c, r]
        };
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Transpose(x), &[x]))
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.val(x);
        let cols = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax_rows", t.shape(), &[0]))?;
        let mut out = t.data().to_vec();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    /// 2-D convolution of x (N, C, H, W) with w (O, C, k, k) and optional
    /// bias (O), zero padding `pad` on each side.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (tx, tw) = (self.val(x), self.val(w));
        let (n, c, h, wd) = dims4("conv2d", tx)?;
        let (o, ci, kh, kw) = dims4("conv2d", tw)?;
        if ci != c || kh != kw || stride == 0 {
            return Err(Error::shape("conv2d", tx.shape(), tw.shape()));
        }
        if let Some(b) = b {
            if self.val(b).shape() != [o] {
                return Err(Error::shape("conv2d bias", self.val(b).shape(), &[o]));
            }
        }
        let k = kh;
        let ho = conv_out_extent(h, k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", tx.shape(), tw.shape()))?;
        let wo = conv_out_extent(wd, k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", tx.shape(), tw.shape()))?;
        let rows = c * k * k;
        let cols_n = ho * wo;
        let mut out = vec![0.0; n * o * cols_n];
        let mut cols = vec![0.0; rows * cols_n];
        for bi in 0..n {
            let xs = &tx.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
            let dst = &mut out[bi * o * cols_n..(bi + 1) * o * cols_n];
            if k == 1 && stride == 1 && pad == 0 {
                gemm(false, false, o, cols_n, rows, 1.0, tw.data(), xs, 0.0, dst);
            } else {
                im2col(xs, c, h, wd, k, stride, pad, ho, wo, &mut cols);
                gemm(false, false, o, cols_n, rows, 1.0, tw.data(), &cols, 0.0, dst);
            }
            if let Some(b) = b {
                let bias = self.val(b).data();
                for (oc, plane) in dst.chunks_mut(cols_n).enumerate() {
                    for v in plane {
                        *v += bias[oc];
                    }
                }
            }
        }
        let v = Tensor::new(vec![n, o, ho, wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &parents,
        ))
    }

    /// Training-mode batch norm over (N, H, W) per channel.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let tx = self.val(x);
        let (n, c, h, w) = dims4("batch_norm", tx)?;
        self.check_channel_vec("batch_norm", gamma, c)?;
        self.check_channel_vec("batch_norm", beta, c)?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let data = tx.data();
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += data[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                    .iter()
                    .sum::<f64>();
            }
            let m = s / count;
            let mut q = 0.0;
            for b in 0..n {
                for v in &data[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    q += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = q / count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, &mean, &inv_std);
        let v = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inference-mode batch norm with fixed statistics. `var` already
    /// includes the stabilizing epsilon and must be positive.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
    ) -> Result<NodeId> {
        let (n, c, h, w) = dims4("batch_norm_eval", self.val(x))?;
        self.check_channel_vec("batch_norm_eval", gamma, c)?;
        self.check_channel_vec("batch_norm_eval", beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm_eval", &[mean.len(), var.len()], &[c, c]));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, mean, &inv_std);
        let v = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            v,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    fn check_channel_vec(&self, op: &'static str, id: NodeId, c: usize) -> Result<()> {
        if self.val(id).shape() != [c] {
            return Err(Error::shape(op, self.val(id).shape(), &[c]));
        }
        Ok(())
    }

    fn normalize(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let tx = self.val(x);
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let plane = h * w;
        let (g, bt) = (self.val(gamma).data(), self.val(beta).data());
        let mut xhat = vec![0.0; tx.len()];
        let mut out = vec![0.0; tx.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (tx.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        (xhat, out)
    }

    /// Channels `[start, start + len)` of a (N, C, H, W) tensor.
    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.val(x);
        let (n, c, h, w) = dims4("slice_channels", t)?;
        if start + len > c {
            return Err(Error::shape("slice_channels", t.shape(), &[n, start + len, h, w]));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            out.extend_from_slice(&t.data()[base..base + len * plane]);
        }
        let v = Tensor::new(vec![n, len, h, w], out)?;
        Ok(self.push(v, Op::SliceChannels { x, start }, &[x]))
    }

    /// (N, 1, H, W) -> (N, C, H, W) by repetition.
    pub fn broadcast_channels(&mut self, x: NodeId, channels: usize) -> Result<NodeId> {
        let t = self.val(x);
        let (n, c, h, w) = dims4("broadcast_channels", t)?;
        if c != 1 {
            return Err(Error::shape("broadcast_channels", t.shape(), &[n, 1, h, w]));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            for _ in 0..channels {
                out.extend_from_slice(&t.data()[b * plane..(b + 1) * plane]);
            }
        }
        let v = Tensor::new(vec![n, channels, h, w], out)?;
        Ok(self.push(v, Op::BroadcastChannels(x), &[x]))
    }

    /// (N, C, H, W) -> (N, H*W, C): one row per spatial location, row-major
    /// over (H, W).
    pub fn to_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.val(x);
        let (n, c, h, w) = dims4("to_tokens", t)?;
        let out = transpose_data(t.data(), n, c, h * w);
        let v = Tensor::new(vec![n, h * w, c], out)?;
        Ok(self.push(v, Op::ToTokens(x), &[x]))
    }

    /// (N, H*W, C) -> (N, C, H, W).
    pub fn from_tokens(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let t = self.val(x);
        let (n, hw, c) = match *t.shape() {
            [n, hw, c] if hw == h * w => (n, hw, c),
            _ => return Err(Error::shape("from_tokens", t.shape(), &[0, h * w, 0])),
        };
        let out = transpose_data(t.data(), n, hw, c);
        let v = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(v, Op::FromTokens(x), &[x]))
    }

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    /// Gradients from repeated calls add up until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.val(loss).len() != 1 {
            return Err(Error::shape("backward", self.val(loss).shape(), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &gy, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(&gy) {
                        *a += b;
                    }
                }
                None => {
                    node.grad = Some(
                        Tensor::new(node.value.shape().to_vec(), gy)
                            .expect("gradient shape follows value shape"),
                    );
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |id: NodeId, f: &dyn Fn(usize) -> f64| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let n = self.nodes[id.0].value.len();
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; n]);
            for (j, s) in slot.iter_mut().enumerate() {
                *s += f(j);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|j| gy[j]);
                acc(*b, &|j| gy[j]);
            }
            Op::Sub(a, b) => {
                acc(*a, &|j| gy[j]);
                acc(*b, &|j| -gy[j]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                acc(*a, &|j| gy[j] * vb[j]);
                acc(*b, &|j| gy[j] * va[j]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                acc(*a, &|j| gy[j] / vb[j]);
                acc(*b, &|j| -gy[j] * va[j] / (vb[j] * vb[j]));
            }
            Op::Scale(x, k) => acc(*x, &|j| gy[j] * k),
            Op::Offset(x) => acc(*x, &|j| gy[j]),
            Op::Pow(x, p) => {
                let vx = self.val(*x).data();
                acc(*x, &|j| gy[j] * p * vx[j].powf(p - 1.0));
            }
            Op::Log(x) => {
                let vx = self.val(*x).data();
                acc(*x, &|j| gy[j] / vx[j]);
            }
            Op::Exp(x) => acc(*x, &|j| gy[j] * y[j]),
            Op::Sigmoid(x) => acc(*x, &|j| gy[j] * y[j] * (1.0 - y[j])),
            Op::LeakyRelu(x, slope) => {
                let vx = self.val(*x).data();
                acc(*x, &|j| if vx[j] > 0.0 { gy[j] } else { gy[j] * slope });
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.val(*x).data();
                acc(*x, &|j| {
                    if vx[j] >= *lo && vx[j] <= *hi {
                        gy[j]
                    } else {
                        0.0
                    }
                });
            }
            Op::Min(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                acc(*a, &|j| if va[j] <= vb[j] { gy[j] } else { 0.0 });
                acc(*b, &|j| if va[j] <= vb[j] { 0.0 } else { gy[j] });
            }
            Op::Max(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                acc(*a, &|j| if va[j] >= vb[j] { gy[j] } else { 0.0 });
                acc(*b, &|j| if va[j] >= vb[j] { 0.0 } else { gy[j] });
            }
            Op::Sum(x) => acc(*x, &|_| gy[0]),
            Op::Mean(x) => {
                let n = self.val(*x).len() as f64;
                acc(*x, &|_| gy[0] / n);
            }
            Op::SumChannels(x) => {
                let s = self.val(*x).shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                acc(*x, &|j| {
                    let b = j / (c * plane);
                    gy[b * plane + j % plane]
                });
            }
            Op::Reshape(x) => acc(*x, &|j| gy[j]),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (bn, m, k) = mat_dims(ta).expect("checked in forward");
                let (_, _, n) = mat_dims(tb).expect("checked in forward");
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; bn * m * k];
                    for i in 0..bn {
                        gemm(
                            false,
                            true,
                            m,
                            k,
                            n,
                            1.0,
                            &gy[i * m * n..(i + 1) * m * n],
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            0.0,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    acc(*a, &|j| da[j]);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; bn * k * n];
                    for i in 0..bn {
                        gemm(
                            true,
                            false,
                            k,
                            n,
                            m,
                            1.0,
                            &ta.data()[i * m * k..(i + 1) * m * k],
                            &gy[i * m * n..(i + 1) * m * n],
                            0.0,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    acc(*b, &|j| db[j]);
                }
            }
            Op::Transpose(x) => {
                let (bn, r, c) = mat_dims(self.val(*x)).expect("checked in forward");
                let back = transpose_data(gy, bn, c, r);
                acc(*x, &|j| back[j]);
            }
            Op::Softmax(x) => {
                let cols = *node.value.shape().last().expect("checked in forward");
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .chunks(cols)
                    .zip(gy.chunks(cols))
                    .zip(dx.chunks_mut(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(*x, &|j| dx[j]);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_backward(*x, *w, *b, *stride, *pad, gy, &mut acc),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let s = self.val(*x).shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let g = self.val(*gamma).data();
                let m = (n * plane) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            dgamma[ch] += gy[i] * xhat[i];
                            dbeta[ch] += gy[i];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; gy.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                            for i in base..base + plane {
                                let dxhat = gy[i] * g[ch];
                                dx[i] = inv_std[ch] / m
                                    * (m * dxhat
                                        - g[ch] * dbeta[ch]
                                        - xhat[i] * g[ch] * dgamma[ch]);
                            }
                        }
                    }
                    acc(*x, &|j| dx[j]);
                }
                acc(*gamma, &|j| dgamma[j]);
                acc(*beta, &|j| dbeta[j]);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.val(*x).shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let g = self.val(*gamma).data();
                let ch_of = |j: usize| (j / plane) % c;
                acc(*x, &|j| gy[j] * g[ch_of(j)] * inv_std[ch_of(j)]);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for j in 0..gy.len() {
                    dgamma[ch_of(j)] += gy[j] * xhat[j];
                    dbeta[ch_of(j)] += gy[j];
                }
                acc(*gamma, &|j| dgamma[j]);
                acc(*beta, &|j| dbeta[j]);
            }
            Op::SliceChannels { x, start } => {
                let s = self.val(*x).shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let len = node.value.shape()[1];
                acc(*x, &|j| {
                    let b = j / (c * plane);
                    let ch = (j / plane) % c;
                    if ch >= *start && ch < start + len {
                        gy[(b * len + ch - start) * plane + j % plane]
                    } else {
                        0.0
                    }
                });
            }
            Op::BroadcastChannels(x) => {
                let s = node.value.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                acc(*x, &|j| {
                    let b = j / plane;
                    (0..c)
                        .map(|ch| gy[(b * c + ch) * plane + j % plane])
                        .sum()
                });
            }
            Op::ToTokens(x) => {
                let s = self.val(*x).shape();
                let back = transpose_data(gy, s[0], s[2] * s[3], s[1]);
                acc(*x, &|j| back[j]);
            }
            Op::FromTokens(x) => {
                let s = self.val(*x).shape();
                let back = transpose_data(gy, s[0], s[2], s[1]);
                acc(*x, &|j| back[j]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        gy: &[f64],
        acc: &mut dyn FnMut(NodeId, &dyn Fn(usize) -> f64),
    ) {
        let (tx, tw) = (self.val(x), self.val(w));
        let s = tx.shape();
        let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
        let (o, k) = (tw.shape()[0], tw.shape()[2]);
        let ho = conv_out_extent(h, k, stride, pad).expect("checked in forward");
        let wo = conv_out_extent(wd, k, stride, pad).expect("checked in forward");
        let rows = c * k * k;
        let cols_n = ho * wo;
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let need_w = self.requires_grad(w);
        let need_x = self.requires_grad(x);

        let mut dw = vec![0.0; o * rows];
        let mut dx = vec![0.0; if need_x { tx.len() } else { 0 }];
        let mut cols = vec![0.0; rows * cols_n];
        let mut dcols = vec![0.0; rows * cols_n];
        for bi in 0..n {
            let xs = &tx.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
            let g = &gy[bi * o * cols_n..(bi + 1) * o * cols_n];
            if need_w {
                let src: &[f64] = if pointwise {
                    xs
                } else {
                    im2col(xs, c, h, wd, k, stride, pad, ho, wo, &mut cols);
                    &cols
                };
                gemm(false, true, o, rows, cols_n, 1.0, g, src, 1.0, &mut dw);
            }
            if need_x {
                let dxs = &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd];
                if pointwise {
                    gemm(true, false, rows, cols_n, o, 1.0, tw.data(), g, 1.0, dxs);
                } else {
                    gemm(true, false, rows, cols_n, o, 1.0, tw.data(), g, 0.0, &mut dcols);
                    col2im_add(&dcols, c, h, wd, k, stride, pad, ho, wo, dxs);
                }
            }
        }
        if need_x {
            acc(x, &|j| dx[j]);
        }
        if need_w {
            acc(w, &|j| dw[j]);
        }
        if let Some(b) = b {
            let mut db = vec![0.0; o];
            for bi in 0..n {
                for (oc, d) in db.iter_mut().enumerate() {
                    let base = (bi * o + oc) * cols_n;
                    *d += gy[base..base + cols_n].iter().sum::<f64>();
                }
            }
            acc(b, &|j| db[j]);
        }
    }
}

/// Transposes each of `batch` row-major `rows x cols` blocks.
fn transpose_data(src: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    let blk = rows * cols;
    for b in 0..batch {
        let s = &src[b * blk..(b + 1) * blk];
        let d = &mut out[b * blk..(b + 1) * blk];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn([2, 3], |i| i as f64));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 0.25);
    }

    #[test]
    fn backward_accumulates_and_resets() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn([3], |i| i as f64));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0; 3]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::new([1, 1], vec![3.7]).unwrap());
        let s1 = g.softmax_rows(one).unwrap();
        assert_eq!(g.value(s1).data(), &[1.0]);

        let x = g.constant(Tensor::new([1, 2], vec![0.0, 3f64.ln()]).unwrap());
        let s = g.softmax_rows(x).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn min_max_ties_go_to_first_operand() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(1.0));
        let b = g.param(Tensor::scalar(1.0));
        let m = g.min(a, b).unwrap();
        let n = g.max(a, b).unwrap();
        let s = g.add(m, n).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().item(), 2.0);
        assert_eq!(g.grad(b).unwrap().item(), 0.0);
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new([1, 1], vec![2.0]).unwrap());
        let b = g.constant(Tensor::new([1, 1], vec![3.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[6.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Tensor::randn([3, 3], 1.0, &mut rng);
        let eye = g.constant(Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let mv = g.constant(m.clone());
        let p = g.matmul(eye, mv).unwrap();
        assert_eq!(g.value(p), &m);

        let bad = g.constant(Tensor::zeros([2, 2]));
        assert!(g.matmul(bad, mv).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn([3, 4], 1.0, &mut rng);
        let b = Tensor::randn([4, 2], 1.0, &mut rng);
        let mut want = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    want[i * 2 + j] += a.at(&[i, k]) * b.at(&[k, j]);
                }
            }
        }
        let mut g = Graph::new();
        let (an, bn) = (g.constant(a), g.constant(b));
        let c = g.matmul(an, bn).unwrap();
        for (x, y) in g.value(c).data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn check(f: impl Fn(&mut Graph, NodeId) -> Result<NodeId>, shape: &[usize], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(shape.to_vec(), 1.0, &mut rng);
        let err = finite_diff_check(f, &x, 1e-4).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        for seed in 0..10 {
            check(
                |g, x| {
                    let s = g.sigmoid(x);
                    let e = g.exp(s);
                    let l = g.log(e);
                    let p = g.pow(l, 3.0);
                    let r = g.leaky_relu(x, 0.1);
                    let m = g.mul(p, r)?;
                    let c = g.clamp(m, -0.5, 0.5);
                    let d = g.add_scalar(s, 1.0);
                    let q = g.div(c, d)?;
                    let mn = g.min(q, r)?;
                    let mx = g.max(mn, s)?;
                    let t = g.sub(mx, x)?;
                    Ok(g.mean(t))
                },
                &[5],
                seed,
            );
        }
    }

    #[test]
    fn matrix_ops_match_finite_differences() {
        for seed in 0..10 {
            check(
                |g, x| {
                    let xt = g.transpose(x)?;
                    let prod = g.matmul(x, xt)?;
                    let sm = g.softmax_rows(prod)?;
                    let w = g.matmul(sm, x)?;
                    let sq = g.mul(w, w)?;
                    Ok(g.sum(sq))
                },
                &[3, 4],
                seed,
            );
        }
    }

    #[test]
    fn spatial_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = Tensor::randn([3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::randn([3], 0.5, &mut rng);
        let gamma = Tensor::rand_uniform([3], 0.5, 1.5, &mut rng);
        let beta = Tensor::randn([3], 0.5, &mut rng);
        for seed in 0..10 {
            for stride in [1, 2] {
                check(
                    |g, x| {
                        let wn = g.constant(w.clone());
                        let bn = g.constant(b.clone());
                        let c = g.conv2d(x, wn, Some(bn), stride, 1)?;
                        let gn = g.constant(gamma.clone());
                        let be = g.constant(beta.clone());
                        let n = g.batch_norm(c, gn, be)?;
                        let a = g.leaky_relu(n, 0.1);
                        let sl = g.slice_channels(a, 1, 2)?;
                        let sc = g.sum_channels(sl)?;
                        let bc = g.broadcast_channels(sc, 3)?;
                        let m = g.mul(bc, a)?;
                        let t = g.to_tokens(m)?;
                        let sh = g.value(m).shape().to_vec();
                        let back = g.from_tokens(t, sh[2], sh[3])?;
                        let sq = g.mul(back, back)?;
                        Ok(g.sum(sq))
                    },
                    &[2, 2, 4, 4],
                    seed,
                );
            }
        }
    }

    #[test]
    fn conv_weight_and_bn_param_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn([2, 2, 5, 5], 1.0, &mut rng);
        for seed in 0..10 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let w = Tensor::randn([3, 2, 3, 3], 0.5, &mut r);
            let err = finite_diff_check(
                |g, wn| {
                    let xn = g.constant(x.clone());
                    let c = g.conv2d(xn, wn, None, 2, 1)?;
                    let gamma = g.param(Tensor::full([3], 1.3));
                    let beta = g.param(Tensor::full([3], 0.2));
                    let n = g.batch_norm_eval(c, gamma, beta, &[0.1, 0.2, 0.3], &[1.5, 0.5, 2.0])?;
                    let s = g.sigmoid(n);
                    Ok(g.sum(s))
                },
                &w,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4);
        }
    }
}
