use rand::Rng;

use super::config::{DetectorConfig, FusionConfig, Variant};
use crate::error::{Error, Result};
use crate::fusion::{build_masks, confidence_graph, cross_attention_graph, fuse_graph, BoundCrossAttention, ConfidencePair, CrossAttentionParams, MaskTriple};
use crate::losses::PredictionNodes;
use crate::tensor::{BoundConvBlock, ConvBlockParams, Graph, NodeId, Tensor, BN_EPS};

/// Focal-loss prior for the class head bias: initial probability 0.01.
const CLS_PRIOR: f64 = 0.01;
/// Raw edge-distance outputs are clamped before `exp`.
const DIST_CLAMP: f64 = 4.0;

/// Dual-stream detector parameters plus SGD velocity buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub variant: Variant,
    pub stride: usize,
    pub num_classes: usize,
    pub theta: f64,
    pub rgb: Vec<ConvBlockParams>,
    pub height: Vec<ConvBlockParams>,
    pub attention: Option<CrossAttentionParams>,
    pub conf_rgb: Option<ConvBlockParams>,
    pub conf_h: Option<ConvBlockParams>,
    /// 3x3 block on the fused features shared by both heads.
    pub neck: ConvBlockParams,
    pub cls_head: ConvBlockParams,
    /// 9 channels: 4 edge distances, 4 vertex offsets, area ratio.
    pub box_head: ConvBlockParams,
    /// One buffer per entry of [`Detector::param_names`].
    pub velocity: Vec<Tensor>,
}

fn stream<R: Rng + ?Sized>(in_ch: usize, blocks: &[[usize; 2]], slope: f64, rng: &mut R) -> Vec<ConvBlockParams> {
    let mut c = in_ch;
    blocks
        .iter()
        .map(|&[out, stride]| {
            let p = ConvBlockParams::init(c, out, 3, stride, true, slope, rng);
            c = out;
            p
        })
        .collect()
}

impl Detector {
    /// Seeded initialization. `rgb_in` is the enhanced RGB channel count.
    pub fn init<R: Rng + ?Sized>(cfg: &DetectorConfig, fusion: &FusionConfig, rgb_in: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        fusion.validate()?;
        let v = cfg.variant;
        let slope = cfg.leaky_slope;
        let rgb = if v.uses_rgb() { stream(rgb_in, &cfg.rgb_blocks, slope, rng) } else { Vec::new() };
        let height = if v.uses_height() { stream(1, &cfg.h_blocks, slope, rng) } else { Vec::new() };
        let feat = match v {
            Variant::HOnly => cfg.h_blocks.last().unwrap()[0],
            _ => cfg.rgb_blocks.last().unwrap()[0],
        };
        let (attention, conf_rgb, conf_h) = if v == Variant::Multimodal {
            let head = |rng: &mut R| ConvBlockParams::pointwise(feat, 1, 0.01, rng);
            (
                Some(CrossAttentionParams::init(feat, feat, fusion.attn_channels, rng)),
                Some(head(rng)),
                Some(head(rng)),
            )
        } else {
            (None, None, None)
        };
        let neck = ConvBlockParams::init(feat, feat, 3, 1, true, slope, rng);
        let mut cls_head = ConvBlockParams::pointwise(feat, cfg.num_classes, 0.01, rng);
        cls_head.bias = Tensor::full([cfg.num_classes], -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln());
        let mut box_head = ConvBlockParams::pointwise(feat, 9, 0.01, rng);
        for k in 0..4 {
            // initial distances of about 1.25 strides
            box_head.bias.data_mut()[k] = 1.25f64.ln();
        }
        let mut d = Detector {
            variant: v,
            stride: cfg.stride(),
            num_classes: cfg.num_classes,
            theta: fusion.theta,
            rgb,
            height,
            attention,
            conf_rgb,
            conf_h,
            neck,
            cls_head,
            box_head,
            velocity: Vec::new(),
        };
        d.velocity = d.params().iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Ok(d)
    }

    /// Blocks in binding order with their checkpoint prefixes.
    pub fn blocks(&self) -> Vec<(String, &ConvBlockParams)> {
        let mut out: Vec<(String, &ConvBlockParams)> = Vec::new();
        out.extend(self.rgb.iter().enumerate().map(|(i, b)| (format!("rgb.{i}"), b)));
        out.extend(self.height.iter().enumerate().map(|(i, b)| (format!("height.{i}"), b)));
        if let Some(a) = &self.attention {
            out.push(("attn.g1".into(), &a.g1));
            out.push(("attn.g2".into(), &a.g2));
            out.push(("attn.g3".into(), &a.g3));
        }
        if let Some(c) = &self.conf_rgb {
            out.push(("conf_rgb".into(), c));
        }
        if let Some(c) = &self.conf_h {
            out.push(("conf_h".into(), c));
        }
        out.push(("neck".into(), &self.neck));
        out.push(("cls".into(), &self.cls_head));
        out.push(("box".into(), &self.box_head));
        out
    }

    /// Same order as [`Detector::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<&mut ConvBlockParams> {
        let mut out: Vec<&mut ConvBlockParams> = Vec::new();
        out.extend(self.rgb.iter_mut());
        out.extend(self.height.iter_mut());
        if let Some(a) = &mut self.attention {
            out.push(&mut a.g1);
            out.push(&mut a.g2);
            out.push(&mut a.g3);
        }
        if let Some(c) = &mut self.conf_rgb {
            out.push(c);
        }
        if let Some(c) = &mut self.conf_h {
            out.push(c);
        }
        out.push(&mut self.neck);
        out.push(&mut self.cls_head);
        out.push(&mut self.box_head);
        out
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, b) in self.blocks() {
            out.push((format!("{name}.weight"), &b.weights));
            out.push((format!("{name}.bias"), &b.bias));
            if let Some(bn) = &b.bn {
                out.push((format!("{name}.bn.gamma"), &bn.gamma));
                out.push((format!("{name}.bn.beta"), &bn.beta));
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|(n, _)| n).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in self.blocks_mut() {
            out.push(&mut b.weights);
            out.push(&mut b.bias);
            if let Some(bn) = &mut b.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters, batch-norm buffers and velocities for a checkpoint.
    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (name, b) in self.blocks() {
            out.push((format!("{name}.weight"), b.weights.clone()));
            out.push((format!("{name}.bias"), b.bias.clone()));
            if let Some(bn) = &b.bn {
                out.push((format!("{name}.bn.gamma"), bn.gamma.clone()));
                out.push((format!("{name}.bn.beta"), bn.beta.clone()));
                out.push((format!("{name}.bn.running_mean"), bn.running_mean.clone()));
                out.push((format!("{name}.bn.running_var"), bn.running_var.clone()));
            }
        }
        for (name, v) in self.param_names().into_iter().zip(&self.velocity) {
            out.push((format!("opt.{name}"), v.clone()));
        }
        out
    }

    /// Overwrites every tensor from `tensors`; names and shapes must match
    /// this architecture exactly.
    pub fn load_named_tensors(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let expected = self.to_named_tensors();
        if tensors.len() != expected.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {} tensors, model expects {}",
                tensors.len(),
                expected.len()
            )));
        }
        for ((n, t), (en, et)) in tensors.iter().zip(&expected) {
            if n != en || t.shape() != et.shape() {
                return Err(Error::Validation(format!(
                    "checkpoint tensor {n} {:?} does not match model tensor {en} {:?}",
                    t.shape(),
                    et.shape()
                )));
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        for b in self.blocks_mut() {
            b.weights = it.next().unwrap();
            b.bias = it.next().unwrap();
            if let Some(bn) = &mut b.bn {
                bn.gamma = it.next().unwrap();
                bn.beta = it.next().unwrap();
                bn.running_mean = it.next().unwrap();
                bn.running_var = it.next().unwrap();
            }
        }
        for v in self.velocity.iter_mut() {
            *v = it.next().unwrap();
        }
        for b in self.blocks_mut() {
            b.validate()?;
        }
        Ok(())
    }

    /// Expected input (rgb, height) channel counts; 0 for unused streams.
    pub fn input_channels(&self) -> (usize, usize) {
        (
            self.rgb.first().map_or(0, |b| b.in_channels()),
            self.height.first().map_or(0, |b| b.in_channels()),
        )
    }
}

/// Graph handles for every block, in [`Detector::blocks`] order.
pub struct BoundDetector {
    pub blocks: Vec<BoundConvBlock>,
    /// Trainable leaves in [`Detector::params`] order.
    pub params: Vec<NodeId>,
}

impl BoundDetector {
    pub fn bind(g: &mut Graph, model: &Detector, trainable: bool) -> Self {
        let blocks: Vec<BoundConvBlock> = model
            .blocks()
            .into_iter()
            .map(|(_, b)| BoundConvBlock::bind(g, b, trainable))
            .collect();
        let mut params = Vec::new();
        for b in &blocks {
            params.push(b.weights);
            params.push(b.bias);
            if let Some(bn) = &b.bn {
                params.push(bn.gamma);
                params.push(bn.beta);
            }
        }
        BoundDetector { blocks, params }
    }
}

/// Everything the losses and decoders need from one forward pass.
pub struct ForwardOutput {
    pub z: NodeId,
    pub conf: Option<(NodeId, NodeId)>,
    pub masks: MaskTriple,
    pub pred: PredictionNodes,
    /// Training-mode batch-norm nodes keyed by block index.
    pub bn_nodes: Vec<(usize, NodeId)>,
}

fn run_stream(
    g: &mut Graph,
    blocks: &[BoundConvBlock],
    offset: usize,
    x: NodeId,
    train: bool,
    bn_nodes: &mut Vec<(usize, NodeId)>,
) -> Result<NodeId> {
    let mut h = x;
    for (i, b) in blocks.iter().enumerate() {
        let (out, bn) = b.forward(g, h, train)?;
        if let Some(n) = bn {
            bn_nodes.push((offset + i, n));
        }
        h = out;
    }
    Ok(h)
}

impl Detector {
    /// Builds the forward pass on `g`. Inputs are (B, C, H, W) nodes for the
    /// streams this variant uses. `masks` pins the hard/easy masks instead of
    /// deriving them from the confidence maps.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &BoundDetector,
        rgb: Option<NodeId>,
        hmap: Option<NodeId>,
        train: bool,
        masks: Option<&MaskTriple>,
    ) -> Result<ForwardOutput> {
        let mut bn_nodes = Vec::new();
        let (nr, nh) = (self.rgb.len(), self.height.len());
        let need = |x: Option<NodeId>, what: &str| {
            x.ok_or_else(|| Error::Validation(format!("{} model needs the {what} input", self.variant.name())))
        };
        let z_rgb = if self.variant.uses_rgb() {
            let x = need(rgb, "rgb")?;
            self.check_input(g.value(x), self.input_channels().0)?;
            Some(run_stream(g, &bound.blocks[..nr], 0, x, train, &mut bn_nodes)?)
        } else {
            None
        };
        let z_h = if self.variant.uses_height() {
            let x = need(hmap, "height")?;
            self.check_input(g.value(x), 1)?;
            Some(run_stream(g, &bound.blocks[nr..nr + nh], nr, x, train, &mut bn_nodes)?)
        } else {
            None
        };
        let mut k = nr + nh;
        let (z, conf, masks) = match (z_rgb, z_h) {
            (Some(zr), Some(zh)) => {
                if g.value(zr).shape() != g.value(zh).shape() {
                    return Err(Error::shape("stream outputs", g.value(zr).shape(), g.value(zh).shape()));
                }
                let attn = BoundCrossAttention {
                    g1: bound.blocks[k].clone(),
                    g2: bound.blocks[k + 1].clone(),
                    g3: bound.blocks[k + 2].clone(),
                    d: self.attention.as_ref().expect("multimodal model has attention").d,
                };
                let mixed = cross_attention_graph(g, zr, zh, &attn)?;
                let (cr, ch) = confidence_graph(g, zr, zh, &bound.blocks[k + 3], &bound.blocks[k + 4])?;
                k += 5;
                let masks = match masks {
                    Some(m) => m.clone(),
                    None => build_masks(&ConfidencePair::new(g.value(cr).clone(), g.value(ch).clone(), self.theta)?),
                };
                let z = fuse_graph(g, mixed.z_mix, zr, zh, &masks, cr, ch)?;
                (z, Some((cr, ch)), masks)
            }
            (Some(z), None) | (None, Some(z)) => {
                let s = g.value(z).shape();
                let masks = MaskTriple::all_easy(&[s[0], 1, s[2], s[3]]);
                (z, None, masks)
            }
            (None, None) => unreachable!("every variant uses a stream"),
        };
        let (neck, bn) = bound.blocks[k].forward(g, z, train)?;
        if let Some(n) = bn {
            bn_nodes.push((k, n));
        }
        let (logits, _) = bound.blocks[k + 1].forward(g, neck, false)?;
        let cls = g.sigmoid(logits);
        let (raw, _) = bound.blocks[k + 2].forward(g, neck, false)?;
        let l_raw = g.slice_channels(raw, 0, 4)?;
        let l_raw = g.clamp(l_raw, -DIST_CLAMP, DIST_CLAMP);
        let l_exp = g.exp(l_raw);
        let l = g.scale(l_exp, self.stride as f64);
        let s_raw = g.slice_channels(raw, 4, 4)?;
        let s = g.sigmoid(s_raw);
        let r_raw = g.slice_channels(raw, 8, 1)?;
        let r = g.sigmoid(r_raw);
        Ok(ForwardOutput {
            z,
            conf,
            masks,
            pred: PredictionNodes { cls, l, s, r },
            bn_nodes,
        })
    }

    fn check_input(&self, x: &Tensor, channels: usize) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != channels {
            return Err(Error::shape("detector input", s, &[0, channels, 0, 0]));
        }
        if s[2] % self.stride != 0 || s[3] % self.stride != 0 {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by the detection stride {}",
                s[3], s[2], self.stride
            )));
        }
        Ok(())
    }

    /// Folds one batch's statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(usize, Vec<f64>, Vec<f64>)], momentum: f64) {
        let mut blocks = self.blocks_mut();
        for (idx, mean, var) in stats {
            let bn = blocks[*idx].bn.as_mut().expect("batch-norm node belongs to a BN block");
            for (c, (m, v)) in mean.iter().zip(var).enumerate() {
                let rm = &mut bn.running_mean.data_mut()[c];
                *rm = momentum * *rm + (1.0 - momentum) * m;
                let rv = &mut bn.running_var.data_mut()[c];
                *rv = momentum * *rv + (1.0 - momentum) * (v + BN_EPS);
            }
        }
    }
}
