use rand::Rng;

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Added to the batch variance before normalizing. Running variances are
/// stored with this epsilon already folded in, so inference divides by
/// `sqrt(running_var)` directly.
pub const BN_EPS: f64 = 1e-5;

pub(crate) fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let ncol = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let ncol = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    /// Includes [`BN_EPS`]; must be strictly positive.
    pub running_var: Tensor,
}

impl BatchNormParams {
    /// gamma = 1, beta = 0, mean = 0, var = 1: the identity transform.
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
        }
    }
}

/// 3x3 (or 1x1) convolution, optional batch norm, leaky ReLU.
///
/// A `leaky_slope` of 1 makes the activation linear, which is how the
/// attention projections and heads are expressed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    /// (out_channels, in_channels, k, k)
    pub weights: Tensor,
    pub bias: Tensor,
    pub bn: Option<BatchNormParams>,
    pub leaky_slope: f64,
    pub stride: usize,
}

impl ConvBlockParams {
    /// He-style normal init, zero bias, identity batch norm.
    pub fn init<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        with_bn: bool,
        leaky_slope: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        ConvBlockParams {
            weights: Tensor::randn([out_ch, in_ch, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
            bias: Tensor::zeros([out_ch]),
            bn: with_bn.then(|| BatchNormParams::identity(out_ch)),
            leaky_slope,
            stride,
        }
    }

    /// 1x1 linear projection without batch norm.
    pub fn pointwise<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, std: f64, rng: &mut R) -> Self {
        ConvBlockParams {
            weights: Tensor::randn([out_ch, in_ch, 1, 1], std, rng),
            bias: Tensor::zeros([out_ch]),
            bn: None,
            leaky_slope: 1.0,
            stride: 1,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn padding(&self) -> usize {
        self.kernel() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weights.shape();
        if s.len() != 4 || s[2] != s[3] || !(s[2] == 1 || s[2] == 3) {
            return Err(Error::Validation(format!(
                "conv kernel must be (O, C, k, k) with k in {{1, 3}}, got {s:?}"
            )));
        }
        if self.bias.shape() != [s[0]] {
            return Err(Error::shape("conv bias", self.bias.shape(), &[s[0]]));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Validation(format!("stride {} not in {{1, 2}}", self.stride)));
        }
        if let Some(bn) = &self.bn {
            for t in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                if t.shape() != [s[0]] {
                    return Err(Error::shape("batch norm", t.shape(), &[s[0]]));
                }
            }
            if bn.running_var.data().iter().any(|&v| v <= 0.0) {
                return Err(Error::Validation("batch norm variance must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Graph handles for one conv block.
#[derive(Debug, Clone)]
pub struct BoundConvBlock {
    pub weights: NodeId,
    pub bias: NodeId,
    pub bn: Option<BoundBatchNorm>,
    pub leaky_slope: f64,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct BoundBatchNorm {
    pub gamma: NodeId,
    pub beta: NodeId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BoundConvBlock {
    /// Registers the block's tensors as graph leaves.
    pub fn bind(g: &mut Graph, p: &ConvBlockParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let weights = leaf(&p.weights);
        let bias = leaf(&p.bias);
        let bn = p.bn.as_ref().map(|bn| BoundBatchNorm {
            gamma: leaf(&bn.gamma),
            beta: leaf(&bn.beta),
            running_mean: bn.running_mean.data().to_vec(),
            running_var: bn.running_var.data().to_vec(),
        });
        BoundConvBlock {
            weights,
            bias,
            bn,
            leaky_slope: p.leaky_slope,
            stride: p.stride,
            padding: p.padding(),
        }
    }

    /// Returns the block output and, in training mode, the batch-norm node
    /// whose batch statistics feed the running buffers.
    pub fn forward(&self, g: &mut Graph, x: NodeId, train: bool) -> Result<(NodeId, Option<NodeId>)> {
        let conv = g.conv2d(x, self.weights, Some(self.bias), self.stride, self.padding)?;
        let (normed, bn_node) = match &self.bn {
            None => (conv, None),
            Some(bn) if train => {
                let n = g.batch_norm(conv, bn.gamma, bn.beta)?;
                (n, Some(n))
            }
            Some(bn) => (
                g.batch_norm_eval(conv, bn.gamma, bn.beta, &bn.running_mean, &bn.running_var)?,
                None,
            ),
        };
        let out = if self.leaky_slope == 1.0 {
            normed
        } else {
            g.leaky_relu(normed, self.leaky_slope)
        };
        Ok((out, bn_node))
    }
}

/// Inference-mode `LeakyReLU(BN(W * x + b))` on a single (d, M, N) feature map.
pub fn conv_block_forward(x: &Tensor, p: &ConvBlockParams) -> Result<Tensor> {
    p.validate()?;
    let s = x.shape();
    if s.len() != 3 || s[0] != p.in_channels() {
        return Err(Error::shape("conv_block_forward", s, p.weights.shape()));
    }
    let mut g = Graph::new();
    let xb = g.constant(x.reshape([1, s[0], s[1], s[2]])?);
    let block = BoundConvBlock::bind(&mut g, p, false);
    let (out, _) = block.forward(&mut g, xb, false)?;
    let v = g.value(out);
    let os = v.shape();
    v.reshape([os[1], os[2], os[3]])
}
