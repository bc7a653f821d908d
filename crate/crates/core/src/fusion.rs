//! Cross-modal attention between the RGB and height streams, per-modality
//! confidence maps, hard/easy masks and the mask-weighted feature fusion.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BoundConvBlock, ConvBlockParams, Graph, NodeId, Tensor};

/// Projections for queries (RGB), keys (height) and values (RGB).
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionParams {
    pub g1: ConvBlockParams,
    pub g2: ConvBlockParams,
    pub g3: ConvBlockParams,
    /// Key dimension in the `1/sqrt(d)` scale.
    pub d: usize,
}

impl CrossAttentionParams {
    pub fn init<R: Rng + ?Sized>(rgb_ch: usize, h_ch: usize, attn_ch: usize, rng: &mut R) -> Self {
        CrossAttentionParams {
            g1: ConvBlockParams::pointwise(rgb_ch, attn_ch, (1.0 / rgb_ch as f64).sqrt(), rng),
            g2: ConvBlockParams::pointwise(h_ch, attn_ch, (1.0 / h_ch as f64).sqrt(), rng),
            g3: ConvBlockParams::pointwise(rgb_ch, rgb_ch, (1.0 / rgb_ch as f64).sqrt(), rng),
            d: attn_ch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in [&self.g1, &self.g2, &self.g3] {
            g.validate()?;
            if g.kernel() != 1 || g.bn.is_some() || g.leaky_slope != 1.0 || g.stride != 1 {
                return Err(Error::Validation(
                    "attention projections must be linear 1x1 convolutions".into(),
                ));
            }
        }
        if self.g1.in_channels() != self.g3.in_channels() {
            return Err(Error::shape("cross_attention g1/g3", self.g1.weights.shape(), self.g3.weights.shape()));
        }
        if self.g1.out_channels() != self.g2.out_channels() {
            return Err(Error::shape("cross_attention g1/g2", self.g1.weights.shape(), self.g2.weights.shape()));
        }
        if self.d == 0 {
            return Err(Error::Validation("attention dimension must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BoundCrossAttention {
    pub g1: BoundConvBlock,
    pub g2: BoundConvBlock,
    pub g3: BoundConvBlock,
    pub d: usize,
}

impl BoundCrossAttention {
    pub fn bind(g: &mut Graph, p: &CrossAttentionParams, trainable: bool) -> Self {
        BoundCrossAttention {
            g1: BoundConvBlock::bind(g, &p.g1, trainable),
            g2: BoundConvBlock::bind(g, &p.g2, trainable),
            g3: BoundConvBlock::bind(g, &p.g3, trainable),
            d: p.d,
        }
    }
}

/// Graph outputs of one attention evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    /// (B, C, M, N) fused features.
    pub z_mix: NodeId,
    /// (B, M*N, M*N) row-stochastic weights; row = RGB query location.
    pub weights: NodeId,
}

/// `softmax(Q K^T / sqrt(d)) V` over row-major flattened locations, with
/// Q = g1(z_rgb), K = g2(z_h), V = g3(z_rgb). Inputs are (B, C, M, N).
pub fn cross_attention_graph(
    g: &mut Graph,
    z_rgb: NodeId,
    z_h: NodeId,
    p: &BoundCrossAttention,
) -> Result<AttentionNodes> {
    let (sr, sh) = (g.value(z_rgb).shape().to_vec(), g.value(z_h).shape().to_vec());
    if sr.len() != 4 || sh.len() != 4 || sr[0] != sh[0] || sr[2..] != sh[2..] {
        return Err(Error::shape("cross_attention (modalities must be co-registered)", &sr, &sh));
    }
    let (m, n) = (sr[2], sr[3]);
    let (q, _) = p.g1.forward(g, z_rgb, false)?;
    let (k, _) = p.g2.forward(g, z_h, false)?;
    let (v, _) = p.g3.forward(g, z_rgb, false)?;
    let qt = g.to_tokens(q)?;
    let kt = g.to_tokens(k)?;
    let vt = g.to_tokens(v)?;
    let k_tr = g.transpose(kt)?;
    let scores = g.matmul(qt, k_tr)?;
    let scaled = g.scale(scores, 1.0 / (p.d as f64).sqrt());
    let weights = g.softmax_rows(scaled)?;
    let mixed = g.matmul(weights, vt)?;
    let z_mix = g.from_tokens(mixed, m, n)?;
    Ok(AttentionNodes { z_mix, weights })
}

fn batch1(t: &Tensor, op: &'static str) -> Result<Tensor> {
    match *t.shape() {
        [c, m, n] => t.reshape([1, c, m, n]),
        _ => Err(Error::shape(op, t.shape(), &[0, 0, 0])),
    }
}

fn unbatch(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    t.reshape(s[1..].to_vec())
}

/// Cross attention on single (C, M, N) feature maps.
pub fn cross_attention(z_rgb: &Tensor, z_h: &Tensor, p: &CrossAttentionParams) -> Result<Tensor> {
    p.validate()?;
    let mut g = Graph::new();
    let zr = g.constant(batch1(z_rgb, "cross_attention")?);
    let zh = g.constant(batch1(z_h, "cross_attention")?);
    let bound = BoundCrossAttention::bind(&mut g, p, false);
    let out = cross_attention_graph(&mut g, zr, zh, &bound)?;
    unbatch(g.value(out.z_mix))
}

/// Per-modality sigmoid confidences and the shared threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidencePair {
    pub conf_rgb: Tensor,
    pub conf_h: Tensor,
    pub theta: f64,
}

impl ConfidencePair {
    pub fn new(conf_rgb: Tensor, conf_h: Tensor, theta: f64) -> Result<Self> {
        if conf_rgb.shape() != conf_h.shape() {
            return Err(Error::shape("ConfidencePair", conf_rgb.shape(), conf_h.shape()));
        }
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::Validation(format!("theta {theta} outside (0, 1)")));
        }
        Ok(ConfidencePair {
            conf_rgb,
            conf_h,
            theta,
        })
    }
}

/// Graph form: `(sigmoid(h_rgb(z_rgb)), sigmoid(h_h(z_h)))`, each (B, 1, M, N).
pub fn confidence_graph(
    g: &mut Graph,
    z_rgb: NodeId,
    z_h: NodeId,
    head_rgb: &BoundConvBlock,
    head_h: &BoundConvBlock,
) -> Result<(NodeId, NodeId)> {
    let (lr, _) = head_rgb.forward(g, z_rgb, false)?;
    let (lh, _) = head_h.forward(g, z_h, false)?;
    for l in [lr, lh] {
        if g.value(l).shape()[1] != 1 {
            return Err(Error::shape("confidence head", g.value(l).shape(), &[0, 1, 0, 0]));
        }
    }
    Ok((g.sigmoid(lr), g.sigmoid(lh)))
}

/// Confidence maps of shape (M, N) from single (C, M, N) feature maps.
pub fn confidence_maps(
    z_rgb: &Tensor,
    z_h: &Tensor,
    head_rgb: &ConvBlockParams,
    head_h: &ConvBlockParams,
    theta: f64,
) -> Result<ConfidencePair> {
    for h in [head_rgb, head_h] {
        h.validate()?;
        if h.out_channels() != 1 || h.kernel() != 1 {
            return Err(Error::shape("confidence head", h.weights.shape(), &[1, 0, 1, 1]));
        }
    }
    let mut g = Graph::new();
    let zr = g.constant(batch1(z_rgb, "confidence_maps")?);
    let zh = g.constant(batch1(z_h, "confidence_maps")?);
    let hr = BoundConvBlock::bind(&mut g, head_rgb, false);
    let hh = BoundConvBlock::bind(&mut g, head_h, false);
    let (cr, ch) = confidence_graph(&mut g, zr, zh, &hr, &hh)?;
    let plane = |t: &Tensor| {
        let s = t.shape();
        t.reshape([s[2], s[3]])
    };
    ConfidencePair::new(plane(g.value(cr))?, plane(g.value(ch))?, theta)
}

/// Binary masks; at most one is 1 at any location.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTriple {
    pub easy: Tensor,
    pub rgb_only: Tensor,
    pub h_only: Tensor,
}

impl MaskTriple {
    /// Every location marked easy (used by the single-modality variants).
    pub fn all_easy(shape: &[usize]) -> Self {
        MaskTriple {
            easy: Tensor::ones(shape.to_vec()),
            rgb_only: Tensor::zeros(shape.to_vec()),
            h_only: Tensor::zeros(shape.to_vec()),
        }
    }

    /// `rgb_only + h_only`.
    pub fn hard(&self) -> Tensor {
        self.rgb_only
            .zip_map(&self.h_only, |a, b| a + b)
            .expect("mask shapes agree")
    }

    pub fn shape(&self) -> &[usize] {
        self.easy.shape()
    }
}

/// Thresholds both confidences: above/above is easy, above/below is hard for
/// the modality that still sees the object. A confidence equal to `theta`
/// counts as below.
pub fn build_masks(conf: &ConfidencePair) -> MaskTriple {
    let th = conf.theta;
    let pick = |f: fn(bool, bool) -> bool| {
        conf.conf_rgb
            .zip_map(&conf.conf_h, |r, h| if f(r > th, h > th) { 1.0 } else { 0.0 })
            .expect("ConfidencePair shapes agree")
    };
    MaskTriple {
        easy: pick(|r, h| r && h),
        rgb_only: pick(|r, h| r && !h),
        h_only: pick(|r, h| !r && h),
    }
}

/// Graph form of the mask-weighted sum. Masks enter as constants; the
/// `(2 - conf)` factors stay on the tape. All feature nodes are
/// (B, C, M, N); masks and confidences (B, 1, M, N).
pub fn fuse_graph(
    g: &mut Graph,
    z_mix: NodeId,
    z_rgb: NodeId,
    z_h: NodeId,
    masks: &MaskTriple,
    conf_rgb: NodeId,
    conf_h: NodeId,
) -> Result<NodeId> {
    let s = g.value(z_mix).shape().to_vec();
    for z in [z_rgb, z_h] {
        if g.value(z).shape() != s.as_slice() {
            return Err(Error::shape("fuse", &s, g.value(z).shape()));
        }
    }
    let mshape = [s[0], 1, s[2], s[3]];
    for t in [&masks.easy, &masks.rgb_only, &masks.h_only] {
        if t.shape() != mshape {
            return Err(Error::shape("fuse masks", t.shape(), &mshape));
        }
    }
    let c = s[1];
    let m_easy = g.constant(masks.easy.clone());
    let m_rgb = g.constant(masks.rgb_only.clone());
    let m_h = g.constant(masks.h_only.clone());

    let mix_rgb = g.add(z_mix, z_rgb)?;
    let mix_h = g.add(z_mix, z_h)?;
    let all = g.add(mix_rgb, z_h)?;

    let easy_w = g.broadcast_channels(m_easy, c)?;
    let easy_term = g.mul(easy_w, all)?;

    let soft_rgb = g.rsub_scalar(2.0, conf_rgb);
    let w_rgb = g.mul(m_rgb, soft_rgb)?;
    let w_rgb = g.broadcast_channels(w_rgb, c)?;
    let rgb_term = g.mul(w_rgb, mix_rgb)?;

    let soft_h = g.rsub_scalar(2.0, conf_h);
    let w_h = g.mul(m_h, soft_h)?;
    let w_h = g.broadcast_channels(w_h, c)?;
    let h_term = g.mul(w_h, mix_h)?;

    let z = g.add(easy_term, rgb_term)?;
    g.add(z, h_term)
}

/// Fusion of single (C, M, N) feature maps with (M, N) masks/confidences.
pub fn fuse(
    z_mix: &Tensor,
    z_rgb: &Tensor,
    z_h: &Tensor,
    masks: &MaskTriple,
    conf: &ConfidencePair,
) -> Result<Tensor> {
    let lift = |t: &Tensor| -> Result<Tensor> {
        match *t.shape() {
            [m, n] => t.reshape([1, 1, m, n]),
            _ => Err(Error::shape("fuse", t.shape(), &[0, 0])),
        }
    };
    let mut g = Graph::new();
    let zm = g.constant(batch1(z_mix, "fuse")?);
    let zr = g.constant(batch1(z_rgb, "fuse")?);
    let zh = g.constant(batch1(z_h, "fuse")?);
    let cr = g.constant(lift(&conf.conf_rgb)?);
    let ch = g.constant(lift(&conf.conf_h)?);
    let m4 = MaskTriple {
        easy: lift(&masks.easy)?,
        rgb_only: lift(&masks.rgb_only)?,
        h_only: lift(&masks.h_only)?,
    };
    let z = fuse_graph(&mut g, zm, zr, zh, &m4, cr, ch)?;
    unbatch(g.value(z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_many;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_projection(c: usize) -> ConvBlockParams {
        ConvBlockParams {
            weights: Tensor::from_fn([c, c, 1, 1], |i| if i % (c + 1) == 0 { 1.0 } else { 0.0 }),
            bias: Tensor::zeros([c]),
            bn: None,
            leaky_slope: 1.0,
            stride: 1,
        }
    }

    #[test]
    fn singleton_attention_returns_values() {
        let p = CrossAttentionParams {
            g1: identity_projection(1),
            g2: identity_projection(1),
            g3: identity_projection(1),
            d: 1,
        };
        let zr = Tensor::new([1, 1, 1], vec![2.0]).unwrap();
        let zh = Tensor::new([1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(cross_attention(&zr, &zh, &p).unwrap().data(), &[2.0]);
    }

    #[test]
    fn zero_queries_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = CrossAttentionParams::init(3, 2, 4, &mut rng);
        let zh = Tensor::randn([2, 3, 3], 1.0, &mut rng);
        let out = cross_attention(&Tensor::zeros([3, 3, 3]), &zh, &p).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = CrossAttentionParams::init(2, 2, 2, &mut rng);
        let err = cross_attention(&Tensor::zeros([2, 3, 3]), &Tensor::zeros([2, 3, 4]), &p);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    /// Explicit score matrix, exp-normalize and weighted sum.
    fn dense_attention(zr: &Tensor, zh: &Tensor, p: &CrossAttentionParams) -> Tensor {
        let (c, m, n) = (zr.shape()[0], zr.shape()[1], zr.shape()[2]);
        let hw = m * n;
        let proj = |w: &ConvBlockParams, z: &Tensor, loc: usize| -> Vec<f64> {
            (0..w.out_channels())
                .map(|o| {
                    w.bias.data()[o]
                        + (0..w.in_channels())
                            .map(|i| w.weights.at(&[o, i, 0, 0]) * z.data()[i * hw + loc])
                            .sum::<f64>()
                })
                .collect()
        };
        let mut out = Tensor::zeros([c, m, n]);
        for qi in 0..hw {
            let q = proj(&p.g1, zr, qi);
            let scores: Vec<f64> = (0..hw)
                .map(|kj| {
                    let k = proj(&p.g2, zh, kj);
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (p.d as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for kj in 0..hw {
                let v = proj(&p.g3, zr, kj);
                for ch in 0..c {
                    out.data_mut()[ch * hw + qi] += e[kj] / z * v[ch];
                }
            }
        }
        out
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = CrossAttentionParams::init(2, 2, 2, &mut rng);
        p.g3.bias = Tensor::randn([2], 0.5, &mut rng);
        let zr = Tensor::randn([2, 3, 3], 1.0, &mut rng);
        let zh = Tensor::randn([2, 3, 3], 1.0, &mut rng);
        let got = cross_attention(&zr, &zh, &p).unwrap();
        assert!(got.max_abs_diff(&dense_attention(&zr, &zh, &p)) < 1e-10);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = CrossAttentionParams::init(3, 2, 4, &mut rng);
        let mut g = Graph::new();
        let zr = g.constant(Tensor::randn([2, 3, 4, 4], 2.0, &mut rng));
        let zh = g.constant(Tensor::randn([2, 2, 4, 4], 2.0, &mut rng));
        let b = BoundCrossAttention::bind(&mut g, &p, false);
        let out = cross_attention_graph(&mut g, zr, zh, &b).unwrap();
        for row in g.value(out.weights).data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_attention_gradients() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let p = CrossAttentionParams::init(2, 2, 2, &mut rng);
            let xs = vec![
                Tensor::randn([1, 2, 2, 4], 1.0, &mut rng),
                Tensor::randn([1, 2, 2, 4], 1.0, &mut rng),
                p.g1.weights.clone(),
                p.g2.weights.clone(),
                p.g3.weights.clone(),
            ];
            let err = finite_diff_check_many(
                |g, ids| {
                    let mut b = BoundCrossAttention::bind(g, &p, false);
                    b.g1.weights = ids[2];
                    b.g2.weights = ids[3];
                    b.g3.weights = ids[4];
                    let out = cross_attention_graph(g, ids[0], ids[1], &b)?;
                    Ok(g.sum(out.z_mix))
                },
                &xs,
                1e-4,
                None,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn confidence_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut head = ConvBlockParams::pointwise(3, 1, 0.5, &mut rng);
        let z = Tensor::zeros([3, 2, 2]);
        let c = confidence_maps(&z, &z, &head, &head, 0.2).unwrap();
        assert!(c.conf_rgb.data().iter().all(|&v| v == 0.5));
        head.bias = Tensor::full([1], 50.0);
        let c = confidence_maps(&z, &z, &head, &head, 0.2).unwrap();
        assert!(c.conf_h.data().iter().all(|&v| v >= 1.0 - 1e-20));
        let wide = ConvBlockParams::pointwise(3, 2, 0.5, &mut rng);
        assert!(confidence_maps(&z, &z, &wide, &head, 0.2).is_err());
    }

    #[test]
    fn confidence_matches_composed_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let head = ConvBlockParams::pointwise(3, 1, 0.7, &mut rng);
        let z = Tensor::randn([3, 4, 5], 1.0, &mut rng);
        let c = confidence_maps(&z, &z, &head, &head, 0.2).unwrap();
        let logits = crate::tensor::conv_block_forward(&z, &head).unwrap();
        let want = logits.map(crate::tensor::graph_sigmoid);
        assert!(c.conf_rgb.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    fn pair(r: f64, h: f64) -> ConfidencePair {
        ConfidencePair::new(Tensor::full([1, 1], r), Tensor::full([1, 1], h), 0.2).unwrap()
    }

    #[test]
    fn mask_cases() {
        let m = build_masks(&pair(0.9, 0.9));
        assert_eq!((m.easy.item(), m.rgb_only.item(), m.h_only.item()), (1.0, 0.0, 0.0));
        let m = build_masks(&pair(0.9, 0.1));
        assert_eq!((m.easy.item(), m.rgb_only.item(), m.h_only.item()), (0.0, 1.0, 0.0));
        let m = build_masks(&pair(0.1, 0.9));
        assert_eq!((m.easy.item(), m.rgb_only.item(), m.h_only.item()), (0.0, 0.0, 1.0));
        let m = build_masks(&pair(0.1, 0.1));
        assert_eq!((m.easy.item(), m.rgb_only.item(), m.h_only.item()), (0.0, 0.0, 0.0));
        // equality counts as "not above"
        let m = build_masks(&pair(0.2, 0.9));
        assert_eq!((m.easy.item(), m.h_only.item()), (0.0, 1.0));
    }

    fn masks_at(easy: f64, rgb: f64, h: f64) -> MaskTriple {
        MaskTriple {
            easy: Tensor::full([1, 1], easy),
            rgb_only: Tensor::full([1, 1], rgb),
            h_only: Tensor::full([1, 1], h),
        }
    }

    #[test]
    fn fuse_examples() {
        let f = |v: f64| Tensor::full([2, 1, 1], v);
        let out = fuse(&f(1.0), &f(2.0), &f(3.0), &masks_at(1.0, 0.0, 0.0), &pair(0.9, 0.9)).unwrap();
        assert_eq!(out.data(), &[6.0, 6.0]);
        let out = fuse(&f(1.0), &f(2.0), &f(3.0), &masks_at(0.0, 1.0, 0.0), &pair(0.9, 0.1)).unwrap();
        assert!(out.data().iter().all(|v| (v - 3.3).abs() < 1e-12));
        let out = fuse(&f(1.0), &f(2.0), &f(3.0), &masks_at(0.0, 0.0, 0.0), &pair(0.1, 0.1)).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn fuse_gradients_skip_masks_but_reach_confidences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let conf = ConfidencePair::new(
                Tensor::rand_uniform([1, 1, 3, 3], 0.01, 0.99, &mut rng),
                Tensor::rand_uniform([1, 1, 3, 3], 0.01, 0.99, &mut rng),
                0.4,
            )
            .unwrap();
            let masks = build_masks(&conf);
            let xs = vec![
                Tensor::randn([1, 2, 3, 3], 1.0, &mut rng),
                Tensor::randn([1, 2, 3, 3], 1.0, &mut rng),
                Tensor::randn([1, 2, 3, 3], 1.0, &mut rng),
                conf.conf_rgb.clone(),
                conf.conf_h.clone(),
            ];
            let err = finite_diff_check_many(
                |g, ids| {
                    let z = fuse_graph(g, ids[0], ids[1], ids[2], &masks, ids[3], ids[4])?;
                    let sq = g.mul(z, z)?;
                    Ok(g.sum(sq))
                },
                &xs,
                1e-4,
                None,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    proptest! {
        #[test]
        fn masks_partition_and_background_is_zero(
            r in prop::collection::vec(0.0f64..1.0, 16),
            h in prop::collection::vec(0.0f64..1.0, 16),
            theta in 0.05f64..0.95,
        ) {
            let conf = ConfidencePair::new(
                Tensor::new([4, 4], r).unwrap(),
                Tensor::new([4, 4], h).unwrap(),
                theta,
            ).unwrap();
            let m = build_masks(&conf);
            let z = Tensor::from_fn([3, 4, 4], |i| (i as f64).sin() * 5.0);
            let out = fuse(&z, &z, &z, &m, &conf).unwrap();
            for i in 0..16 {
                let (e, a, b) = (m.easy.data()[i], m.rgb_only.data()[i], m.h_only.data()[i]);
                prop_assert!([e, a, b].iter().all(|v| *v == 0.0 || *v == 1.0));
                prop_assert!(e + a + b <= 1.0);
                if a == 1.0 {
                    let w = 2.0 - conf.conf_rgb.data()[i];
                    prop_assert!((1.0..2.0 - theta).contains(&w));
                }
                if e + a + b == 0.0 {
                    for c in 0..3 {
                        prop_assert_eq!(out.data()[c * 16 + i], 0.0);
                    }
                }
            }
            // raising theta never creates an easy location
            let higher = ConfidencePair { theta: (theta + 0.03).min(0.99), ..conf.clone() };
            let m2 = build_masks(&higher);
            for i in 0..16 {
                prop_assert!(m2.easy.data()[i] <= m.easy.data()[i]);
            }
        }
    }
}
