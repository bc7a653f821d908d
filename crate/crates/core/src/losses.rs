//! Focal classification loss, box regression loss, grid label assignment and
//! the easy/hard/total objectives over a prediction grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::MaskTriple;
use crate::geom::{encode_obb, hbb_iou_from_distances, BoxEncoding, ObbAnnotation, Point};
use crate::tensor::{Graph, NodeId, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal_gamma: f64,
    /// Confidence threshold; must equal `fusion.theta`.
    pub theta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_gamma: 2.0,
            theta: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::Config(format!("loss.focal_gamma = {} must be >= 0", self.focal_gamma)));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("loss.theta = {} outside (0, 1)", self.theta)));
        }
        Ok(())
    }
}

/// `-(1 - p_t)^gamma * ln(p_t)` with `p_t = p_hat` for positives.
pub fn focal_loss(p_hat: f64, p: f64, gamma: f64) -> f64 {
    let q = p_hat.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pt = if p >= 0.5 { q } else { 1.0 - q };
    -(1.0 - pt).powf(gamma) * pt.ln()
}

/// `1 - IoU(l, l_hat) + sum (s - s_hat)^2 + (r - r_hat)^2`.
pub fn obb_regression_loss(gt: &BoxEncoding, pred: &BoxEncoding) -> f64 {
    let iou = hbb_iou_from_distances(&gt.l, &pred.l).iou;
    let ds: f64 = gt.s.iter().zip(&pred.s).map(|(a, b)| (a - b) * (a - b)).sum();
    1.0 - iou + ds + (gt.r - pred.r) * (gt.r - pred.r)
}

/// Elementwise focal loss of probabilities `p_hat` against constant 0/1
/// `target` of the same shape.
pub fn focal_loss_graph(g: &mut Graph, p_hat: NodeId, target: &Tensor, gamma: f64) -> Result<NodeId> {
    if g.value(p_hat).shape() != target.shape() {
        return Err(Error::shape("focal_loss", g.value(p_hat).shape(), target.shape()));
    }
    let q = g.clamp(p_hat, PROB_EPS, 1.0 - PROB_EPS);
    // p_t = (1 - t) + (2t - 1) q
    let coef = g.constant(target.map(|t| 2.0 * t - 1.0));
    let offset = g.constant(target.map(|t| 1.0 - t));
    let scaled = g.mul(coef, q)?;
    let pt = g.add(scaled, offset)?;
    let log_pt = g.log(pt);
    let nll = g.scale(log_pt, -1.0);
    if gamma == 0.0 {
        return Ok(nll);
    }
    let miss = g.rsub_scalar(1.0, pt);
    let w = g.pow(miss, gamma);
    g.mul(w, nll)
}

/// Per-location regression loss for (B, 4|1, M, N) maps. Ground truth enters
/// as constants.
pub fn regression_loss_graph(
    g: &mut Graph,
    pred: &PredictionNodes,
    gt_l: &Tensor,
    gt_s: &Tensor,
    gt_r: &Tensor,
) -> Result<NodeId> {
    let tl = g.constant(gt_l.clone());
    let ts = g.constant(gt_s.clone());
    let tr = g.constant(gt_r.clone());
    let mut p = Vec::with_capacity(4);
    let mut t = Vec::with_capacity(4);
    for k in 0..4 {
        p.push(g.slice_channels(pred.l, k, 1)?);
        t.push(g.slice_channels(tl, k, 1)?);
    }
    let extent = |g: &mut Graph, a: NodeId, b: NodeId| g.add(a, b);
    let mins: Vec<NodeId> = (0..4).map(|k| g.min(p[k], t[k])).collect::<Result<_>>()?;
    let ow = extent(g, mins[0], mins[2])?;
    let oh = extent(g, mins[1], mins[3])?;
    let overlap = g.mul(ow, oh)?;
    let pw = extent(g, p[0], p[2])?;
    let ph = extent(g, p[1], p[3])?;
    let area_hat = g.mul(pw, ph)?;
    let tw = extent(g, t[0], t[2])?;
    let th = extent(g, t[1], t[3])?;
    let area = g.mul(tw, th)?;
    let both = g.add(area, area_hat)?;
    let union = g.sub(both, overlap)?;
    let union = g.clamp(union, 1e-12, f64::INFINITY);
    let iou = g.div(overlap, union)?;
    let iou_term = g.rsub_scalar(1.0, iou);

    let ds = g.sub(pred.s, ts)?;
    let ds2 = g.mul(ds, ds)?;
    let s_term = g.sum_channels(ds2)?;
    let dr = g.sub(pred.r, tr)?;
    let r_term = g.mul(dr, dr)?;

    let acc = g.add(iou_term, s_term)?;
    g.add(acc, r_term)
}

/// Head outputs on the tape, all (B, ·, M, N).
#[derive(Debug, Clone, Copy)]
pub struct PredictionNodes {
    /// Class probabilities (B, K, M, N).
    pub cls: NodeId,
    /// Edge distances in pixels (B, 4, M, N).
    pub l: NodeId,
    /// Vertex offsets (B, 4, M, N).
    pub s: NodeId,
    /// Area ratio (B, 1, M, N).
    pub r: NodeId,
}

/// Grid targets. Box channels are zero where `objectness` is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    /// (B, 1, M, N)
    pub objectness: Tensor,
    /// (B, K, M, N) one-hot
    pub class_onehot: Tensor,
    /// (B, 4, M, N)
    pub l: Tensor,
    /// (B, 4, M, N)
    pub s: Tensor,
    /// (B, 1, M, N)
    pub r: Tensor,
    /// Confidence-head targets; copies of `objectness`.
    pub obj_rgb: Tensor,
    pub obj_h: Tensor,
    /// Annotations that could not be placed (cell already taken or center
    /// outside the grid).
    pub dropped: usize,
}

/// Point at the center of grid cell `(i, j)`.
pub fn cell_center(i: usize, j: usize, stride: usize) -> Point {
    Point::new((j as f64 + 0.5) * stride as f64, (i as f64 + 0.5) * stride as f64)
}

impl TargetAssignment {
    /// Assigns each annotation to the cell containing its center, per image.
    /// When two centers share a cell the one nearer the cell center wins.
    pub fn assign(
        per_image: &[Vec<ObbAnnotation>],
        num_classes: usize,
        grid: (usize, usize),
        stride: usize,
    ) -> Result<Self> {
        let (m, n) = grid;
        let b = per_image.len();
        let plane = m * n;
        let mut t = TargetAssignment {
            objectness: Tensor::zeros([b, 1, m, n]),
            class_onehot: Tensor::zeros([b, num_classes, m, n]),
            l: Tensor::zeros([b, 4, m, n]),
            s: Tensor::zeros([b, 4, m, n]),
            r: Tensor::zeros([b, 1, m, n]),
            obj_rgb: Tensor::zeros([b, 1, m, n]),
            obj_h: Tensor::zeros([b, 1, m, n]),
            dropped: 0,
        };
        for (bi, anns) in per_image.iter().enumerate() {
            let mut owner: Vec<Option<(f64, BoxEncoding, u32)>> = vec![None; plane];
            for a in anns {
                if a.class_id as usize >= num_classes {
                    return Err(Error::Validation(format!(
                        "class {} outside 0..{num_classes}",
                        a.class_id
                    )));
                }
                let (fx, fy) = (a.xc / stride as f64, a.yc / stride as f64);
                if fx < 0.0 || fy < 0.0 || fx >= n as f64 || fy >= m as f64 {
                    t.dropped += 1;
                    continue;
                }
                let (i, j) = (fy as usize, fx as usize);
                let c = cell_center(i, j, stride);
                let Ok(enc) = encode_obb(a, c) else {
                    t.dropped += 1;
                    continue;
                };
                let d = c.dist(a.center());
                let slot = &mut owner[i * n + j];
                match slot {
                    Some((d0, ..)) if *d0 <= d => t.dropped += 1,
                    Some(_) => {
                        t.dropped += 1;
                        *slot = Some((d, enc, a.class_id));
                    }
                    None => *slot = Some((d, enc, a.class_id)),
                }
            }
            for (loc, o) in owner.iter().enumerate() {
                let Some((_, enc, cls)) = o else { continue };
                t.objectness.data_mut()[bi * plane + loc] = 1.0;
                t.class_onehot.data_mut()[(bi * num_classes + *cls as usize) * plane + loc] = 1.0;
                for k in 0..4 {
                    t.l.data_mut()[(bi * 4 + k) * plane + loc] = enc.l[k];
                    t.s.data_mut()[(bi * 4 + k) * plane + loc] = enc.s[k];
                }
                t.r.data_mut()[bi * plane + loc] = enc.r;
            }
        }
        t.obj_rgb = t.objectness.clone();
        t.obj_h = t.objectness.clone();
        Ok(t)
    }

    pub fn num_positive(&self) -> usize {
        self.objectness.data().iter().filter(|&&v| v > 0.5).count()
    }

    /// Encoding stored at a positive location.
    pub fn encoding_at(&self, b: usize, i: usize, j: usize) -> Option<BoxEncoding> {
        let s = self.objectness.shape();
        let (m, n) = (s[2], s[3]);
        let plane = m * n;
        let loc = i * n + j;
        if self.objectness.data()[b * plane + loc] < 0.5 {
            return None;
        }
        let ch = |t: &Tensor, k: usize, c: usize| t.data()[(b * c + k) * plane + loc];
        Some(BoxEncoding {
            l: [0, 1, 2, 3].map(|k| ch(&self.l, k, 4)),
            s: [0, 1, 2, 3].map(|k| ch(&self.s, k, 4)),
            r: self.r.data()[b * plane + loc],
        })
    }
}

/// Per-location loss maps, each (B, 1, M, N).
#[derive(Debug, Clone)]
pub struct LocationLosses {
    /// Box regression loss (meaningful only where `objectness` = 1).
    pub reg: NodeId,
    /// Focal classification loss summed over classes.
    pub cls: NodeId,
    /// `objectness * reg + cls`.
    pub combined: NodeId,
    pub objectness: Tensor,
}

pub fn location_losses(
    g: &mut Graph,
    pred: &PredictionNodes,
    targets: &TargetAssignment,
    gamma: f64,
) -> Result<LocationLosses> {
    let reg = regression_loss_graph(g, pred, &targets.l, &targets.s, &targets.r)?;
    let focal = focal_loss_graph(g, pred.cls, &targets.class_onehot, gamma)?;
    let cls = g.sum_channels(focal)?;
    let obj = g.constant(targets.objectness.clone());
    let gated = g.mul(obj, reg)?;
    let combined = g.add(gated, cls)?;
    Ok(LocationLosses {
        reg,
        cls,
        combined,
        objectness: targets.objectness.clone(),
    })
}

/// `sum(weight * combined) / N` with `N = sum(weight * objectness)`; 0 when
/// `N` is 0. `weight` is a constant (B, 1, M, N) map.
pub fn weighted_location_mean(g: &mut Graph, ll: &LocationLosses, weight: &Tensor) -> Result<NodeId> {
    let n = weight
        .zip_map(&ll.objectness, |w, o| w * o)
        .map_err(|_| Error::shape("weighted_location_mean", weight.shape(), ll.objectness.shape()))?
        .sum();
    if n <= 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let w = g.constant(weight.clone());
    let weighted = g.mul(w, ll.combined)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / n))
}

pub fn easy_loss(g: &mut Graph, ll: &LocationLosses, masks: &MaskTriple) -> Result<NodeId> {
    weighted_location_mean(g, ll, &masks.easy)
}

pub fn hard_loss(g: &mut Graph, ll: &LocationLosses, masks: &MaskTriple) -> Result<NodeId> {
    weighted_location_mean(g, ll, &masks.hard())
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub easy: NodeId,
    pub hard: NodeId,
    pub total: NodeId,
}

pub fn total_loss(g: &mut Graph, ll: &LocationLosses, masks: &MaskTriple) -> Result<LossNodes> {
    let easy = easy_loss(g, ll, masks)?;
    let hard = hard_loss(g, ll, masks)?;
    let total = g.add(easy, hard)?;
    Ok(LossNodes { easy, hard, total })
}

/// Focal loss of both confidence maps against their objectness copies,
/// summed over locations and divided by `max(1, positives)`.
pub fn confidence_loss(
    g: &mut Graph,
    conf_rgb: NodeId,
    conf_h: NodeId,
    targets: &TargetAssignment,
    gamma: f64,
) -> Result<NodeId> {
    let fr = focal_loss_graph(g, conf_rgb, &targets.obj_rgb, gamma)?;
    let fh = focal_loss_graph(g, conf_h, &targets.obj_h, gamma)?;
    let both = g.add(fr, fh)?;
    let s = g.sum(both);
    Ok(g.scale(s, 1.0 / targets.num_positive().max(1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, finite_diff_check_many};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn focal_examples() {
        assert!(focal_loss(1.0 - 1e-12, 1.0, 2.0) < 1e-13);
        assert!((focal_loss(0.5, 1.0, 2.0) - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((focal_loss(0.5, 1.0, 2.0) - 0.173287).abs() < 1e-6);
        for p in [0.1, 0.4, 0.93] {
            assert!((focal_loss(p, 1.0, 0.0) + p.ln()).abs() < 1e-15);
            assert!((focal_loss(p, 0.0, 0.0) + (1.0 - p).ln()).abs() < 1e-15);
        }
        assert!(focal_loss(0.0, 1.0, 2.0).is_finite());
    }

    fn enc(l: f64, s: [f64; 4], r: f64) -> BoxEncoding {
        BoxEncoding { l: [l; 4], s, r }
    }

    #[test]
    fn regression_examples() {
        let gt = enc(1.0, [0.2, 0.3, 0.2, 0.3], 0.7);
        assert_eq!(obb_regression_loss(&gt, &gt), 0.0);
        assert_eq!(obb_regression_loss(&gt, &enc(2.0, gt.s, gt.r)), 0.75);
        let mut p = gt;
        p.s[1] += 0.1;
        assert!((obb_regression_loss(&gt, &p) - 0.01).abs() < 1e-15);
    }

    fn graph_focal(p: &Tensor, t: &Tensor, gamma: f64) -> Tensor {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let f = focal_loss_graph(&mut g, x, t, gamma).unwrap();
        g.value(f).clone()
    }

    #[test]
    fn graph_focal_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Tensor::rand_uniform([40], 0.0, 1.0, &mut rng);
        let t = Tensor::from_fn([40], |i| (i % 3 == 0) as u8 as f64);
        for gamma in [0.0, 0.5, 2.0] {
            let got = graph_focal(&p, &t, gamma);
            for i in 0..40 {
                let want = focal_loss(p.data()[i], t.data()[i], gamma);
                assert!((got.data()[i] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn focal_gradients() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Tensor::rand_uniform([2, 3, 2, 2], 0.05, 0.95, &mut rng);
            let t = Tensor::from_fn([2, 3, 2, 2], |_| rng.random_range(0..2) as f64);
            let err = finite_diff_check(
                |g, x| {
                    let f = focal_loss_graph(g, x, &t, 2.0)?;
                    Ok(g.sum(f))
                },
                &p,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    fn random_maps(rng: &mut ChaCha8Rng, b: usize, m: usize, n: usize) -> [Tensor; 3] {
        [
            Tensor::rand_uniform([b, 4, m, n], 0.5, 6.0, rng),
            Tensor::rand_uniform([b, 4, m, n], 0.05, 0.95, rng),
            Tensor::rand_uniform([b, 1, m, n], 0.3, 1.0, rng),
        ]
    }

    fn enc_at(l: &Tensor, s: &Tensor, r: &Tensor, b: usize, loc: usize, plane: usize) -> BoxEncoding {
        BoxEncoding {
            l: [0, 1, 2, 3].map(|k| l.data()[(b * 4 + k) * plane + loc]),
            s: [0, 1, 2, 3].map(|k| s.data()[(b * 4 + k) * plane + loc]),
            r: r.data()[b * plane + loc],
        }
    }

    #[test]
    fn regression_map_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let [gl, gs, gr] = random_maps(&mut rng, 2, 3, 3);
        let [pl, ps, pr] = random_maps(&mut rng, 2, 3, 3);
        let mut g = Graph::new();
        let pred = PredictionNodes {
            cls: g.constant(Tensor::zeros([2, 1, 3, 3])),
            l: g.constant(pl.clone()),
            s: g.constant(ps.clone()),
            r: g.constant(pr.clone()),
        };
        let map = regression_loss_graph(&mut g, &pred, &gl, &gs, &gr).unwrap();
        for b in 0..2 {
            for loc in 0..9 {
                let want = obb_regression_loss(&enc_at(&gl, &gs, &gr, b, loc, 9), &enc_at(&pl, &ps, &pr, b, loc, 9));
                assert!((g.value(map).data()[b * 9 + loc] - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn regression_gradients() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let [gl, gs, gr] = random_maps(&mut rng, 1, 2, 3);
            let [pl, ps, pr] = random_maps(&mut rng, 1, 2, 3);
            let err = finite_diff_check_many(
                |g, ids| {
                    let cls = g.constant(Tensor::zeros([1, 1, 2, 3]));
                    let pred = PredictionNodes { cls, l: ids[0], s: ids[1], r: ids[2] };
                    let m = regression_loss_graph(g, &pred, &gl, &gs, &gr)?;
                    Ok(g.sum(m))
                },
                &[pl.clone(), ps.clone(), pr.clone()],
                1e-4,
                None,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    fn single_cell_targets(cls: u32) -> TargetAssignment {
        let a = ObbAnnotation::new(cls, 6.0, 5.0, 8.0, 4.0, 20.0).unwrap();
        TargetAssignment::assign(&[vec![a]], 2, (3, 3), 4).unwrap()
    }

    #[test]
    fn assignment_uses_center_cell() {
        let t = single_cell_targets(1);
        assert_eq!(t.num_positive(), 1);
        assert_eq!(t.objectness.at(&[0, 0, 1, 1]), 1.0);
        assert_eq!(t.class_onehot.at(&[0, 1, 1, 1]), 1.0);
        assert_eq!(t.class_onehot.at(&[0, 0, 1, 1]), 0.0);
        let enc = t.encoding_at(0, 1, 1).unwrap();
        let back = crate::geom::decode_obb_lenient(&enc, cell_center(1, 1, 4), 1).unwrap();
        assert!((back.xc - 6.0).abs() < 1e-9 && (back.theta - 20.0).abs() < 1e-9);
        assert!(t.encoding_at(0, 0, 0).is_none());
        assert_eq!(t.obj_rgb, t.objectness);
    }

    #[test]
    fn assignment_collisions_and_bounds() {
        let a = ObbAnnotation::new(0, 6.0, 6.0, 8.0, 4.0, 0.0).unwrap();
        let b = ObbAnnotation::new(0, 7.5, 7.5, 8.0, 4.0, 0.0).unwrap();
        let out = ObbAnnotation::new(0, 30.0, 6.0, 8.0, 4.0, 0.0).unwrap();
        let t = TargetAssignment::assign(&[vec![b, a, out]], 1, (3, 3), 4).unwrap();
        assert_eq!((t.num_positive(), t.dropped), (1, 2));
        // the nearer center wins regardless of order
        assert_eq!(t.encoding_at(0, 1, 1).unwrap().l[0], 6.0 - 2.0);
        let bad = ObbAnnotation::new(5, 6.0, 6.0, 8.0, 4.0, 0.0).unwrap();
        assert!(TargetAssignment::assign(&[vec![bad]], 1, (3, 3), 4).is_err());
    }

    struct Fixture {
        g: Graph,
        ll: LocationLosses,
    }

    fn fixture(seed: u64, b: usize, m: usize, n: usize) -> (Fixture, TargetAssignment) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_image: Vec<Vec<ObbAnnotation>> = (0..b)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        ObbAnnotation::new(
                            0,
                            rng.random_range(1.0..(4 * n) as f64 - 1.0),
                            rng.random_range(1.0..(4 * m) as f64 - 1.0),
                            rng.random_range(6.0..10.0),
                            rng.random_range(3.0..5.0),
                            rng.random_range(-90.0..90.0),
                        )
                        .unwrap()
                    })
                    .collect()
            })
            .collect();
        let t = TargetAssignment::assign(&per_image, 1, (m, n), 4).unwrap();
        let [pl, ps, pr] = random_maps(&mut rng, b, m, n);
        let mut g = Graph::new();
        let pred = PredictionNodes {
            cls: g.param(Tensor::rand_uniform([b, 1, m, n], 0.05, 0.95, &mut rng)),
            l: g.param(pl),
            s: g.param(ps),
            r: g.param(pr),
        };
        let ll = location_losses(&mut g, &pred, &t, 2.0).unwrap();
        (Fixture { g, ll }, t)
    }

    fn random_masks(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> MaskTriple {
        let picks = Tensor::from_fn(shape, |_| rng.random_range(0..4) as f64);
        MaskTriple {
            easy: picks.map(|v| (v == 1.0) as u8 as f64),
            rgb_only: picks.map(|v| (v == 2.0) as u8 as f64),
            h_only: picks.map(|v| (v == 3.0) as u8 as f64),
        }
    }

    #[test]
    fn hard_loss_matches_loop_oracle() {
        for seed in 0..10 {
            let (mut f, t) = fixture(seed, 2, 4, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let masks = random_masks(&mut rng, [2, 1, 4, 5]);
            let got = hard_loss(&mut f.g, &f.ll, &masks).unwrap();
            let reg = f.g.value(f.ll.reg).data().to_vec();
            let cls = f.g.value(f.ll.cls).data().to_vec();
            let (mut num, mut n) = (0.0, 0.0);
            for i in 0..reg.len() {
                let w = masks.rgb_only.data()[i] + masks.h_only.data()[i];
                let o = t.objectness.data()[i];
                num += w * (o * reg[i] + cls[i]);
                n += w * o;
            }
            let want = if n > 0.0 { num / n } else { 0.0 };
            assert!((f.g.value(got).item() - want).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn easy_and_hard_edge_cases() {
        let (mut f, _) = fixture(1, 1, 3, 3);
        let none = MaskTriple {
            easy: Tensor::zeros([1, 1, 3, 3]),
            rgb_only: Tensor::zeros([1, 1, 3, 3]),
            h_only: Tensor::zeros([1, 1, 3, 3]),
        };
        let e = easy_loss(&mut f.g, &f.ll, &none).unwrap();
        assert_eq!(f.g.value(e).item(), 0.0);
        let all = MaskTriple::all_easy(&[1, 1, 3, 3]);
        let h = hard_loss(&mut f.g, &f.ll, &all).unwrap();
        assert_eq!(f.g.value(h).item(), 0.0);
        let parts = total_loss(&mut f.g, &f.ll, &all).unwrap();
        assert_eq!(f.g.value(parts.total).item(), f.g.value(parts.easy).item());
    }

    #[test]
    fn single_hard_location_is_its_own_loss() {
        let t = single_cell_targets(0);
        let mut g = Graph::new();
        let gt = t.encoding_at(0, 1, 1).unwrap();
        let mut l = Tensor::full([1, 4, 3, 3], 1.0);
        let mut s = Tensor::zeros([1, 4, 3, 3]);
        for k in 0..4 {
            l.set(&[0, k, 1, 1], gt.l[k]);
            s.set(&[0, k, 1, 1], gt.s[k] + if k == 0 { 0.3 } else { 0.0 });
        }
        let mut r = Tensor::zeros([1, 1, 3, 3]);
        r.set(&[0, 0, 1, 1], gt.r);
        let mut p = Tensor::full([1, 2, 3, 3], 1e-9);
        p.set(&[0, 0, 1, 1], 0.5);
        let pred = PredictionNodes {
            cls: g.constant(p),
            l: g.constant(l),
            s: g.constant(s),
            r: g.constant(r),
        };
        let ll = location_losses(&mut g, &pred, &t, 2.0).unwrap();
        let mut masks = MaskTriple {
            easy: Tensor::zeros([1, 1, 3, 3]),
            rgb_only: Tensor::zeros([1, 1, 3, 3]),
            h_only: Tensor::zeros([1, 1, 3, 3]),
        };
        masks.rgb_only.set(&[0, 0, 1, 1], 1.0);
        let h = hard_loss(&mut g, &ll, &masks).unwrap();
        let want = 0.09 + focal_loss(0.5, 1.0, 2.0) + focal_loss(1e-9, 0.0, 2.0);
        assert!((g.value(h).item() - want).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradients() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
            let masks = random_masks(&mut rng, [1, 1, 3, 4]);
            let (_, t) = fixture(seed, 1, 3, 4);
            let xs = vec![
                Tensor::rand_uniform([1, 1, 3, 4], 0.05, 0.95, &mut rng),
                Tensor::rand_uniform([1, 4, 3, 4], 0.5, 6.0, &mut rng),
                Tensor::rand_uniform([1, 4, 3, 4], 0.05, 0.95, &mut rng),
                Tensor::rand_uniform([1, 1, 3, 4], 0.3, 1.0, &mut rng),
            ];
            let err = finite_diff_check_many(
                |g, ids| {
                    let pred = PredictionNodes { cls: ids[0], l: ids[1], s: ids[2], r: ids[3] };
                    let ll = location_losses(g, &pred, &t, 2.0)?;
                    Ok(total_loss(g, &ll, &masks)?.total)
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
    fn confidence_loss_normalizes_by_positives() {
        let t = single_cell_targets(0);
        let mut g = Graph::new();
        let c = g.constant(Tensor::full([1, 1, 3, 3], 0.5));
        let l = confidence_loss(&mut g, c, c, &t, 2.0).unwrap();
        let want = 2.0 * (focal_loss(0.5, 1.0, 2.0) + 8.0 * focal_loss(0.5, 0.0, 2.0));
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { focal_gamma: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { theta: 1.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn focal_is_nonnegative_and_decreasing(a in 0.0f64..1.0, b in 0.0f64..1.0, gamma in 0.0f64..4.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(focal_loss(lo, 1.0, gamma) >= 0.0);
            prop_assert!(focal_loss(hi, 1.0, gamma) <= focal_loss(lo, 1.0, gamma));
        }

        #[test]
        fn regression_zero_iff_equal(
            l in prop::array::uniform4(0.5f64..5.0),
            s in prop::array::uniform4(0.0f64..1.0),
            r in 0.1f64..1.0,
            k in 0usize..9,
            delta in 0.01f64..0.5,
        ) {
            let gt = BoxEncoding { l, s, r };
            prop_assert_eq!(obb_regression_loss(&gt, &gt), 0.0);
            let mut p = gt;
            match k {
                0..=3 => p.l[k] += delta,
                4..=7 => p.s[k - 4] += delta,
                _ => p.r += delta,
            }
            prop_assert!(obb_regression_loss(&gt, &p) > 0.0);
        }
    }
}
