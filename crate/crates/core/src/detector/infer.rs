use rayon::prelude::*;

use super::batch::{make_batch, Batch, PreparedSample};
use super::config::DetectorConfig;
use super::model::{BoundDetector, Detector};
use crate::error::Result;
use crate::eval::{average_precision, ApOptions, EvalImage, PrCurve};
use crate::geom::{decode_obb_lenient, nms, BoxEncoding, DetectionRecord};
use crate::losses::cell_center;
use crate::tensor::{Graph, Tensor};

/// Scores are kept strictly below 1 so records stay valid.
const MAX_SCORE: f64 = 1.0 - 1e-12;

/// Evaluation-mode head outputs for one batch, as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// (B, K, M, N) class probabilities.
    pub cls: Tensor,
    pub l: Tensor,
    pub s: Tensor,
    pub r: Tensor,
    /// (B, 1, M, N): 1 where any of the three masks is set.
    pub active: Tensor,
    /// Fused feature map Z.
    pub z: Tensor,
    pub conf: Option<(Tensor, Tensor)>,
}

pub fn head_outputs(model: &Detector, batch: &Batch) -> Result<HeadOutputs> {
    let mut g = Graph::new();
    let bound = BoundDetector::bind(&mut g, model, false);
    let rgb = batch.rgb.clone().map(|t| g.constant(t));
    let hmap = batch.height.clone().map(|t| g.constant(t));
    let out = model.forward_graph(&mut g, &bound, rgb, hmap, false, None)?;
    let m = &out.masks;
    let active = m.easy.zip_map(&m.rgb_only, |a, b| a.max(b))?.zip_map(&m.h_only, |a, b| a.max(b))?;
    Ok(HeadOutputs {
        cls: g.value(out.pred.cls).clone(),
        l: g.value(out.pred.l).clone(),
        s: g.value(out.pred.s).clone(),
        r: g.value(out.pred.r).clone(),
        active,
        z: g.value(out.z).clone(),
        conf: out.conf.map(|(a, b)| (g.value(a).clone(), g.value(b).clone())),
    })
}

/// Candidates at active locations whose best class probability exceeds
/// the confidence threshold, decoded and passed through NMS.
pub fn decode_detections(heads: &HeadOutputs, b: usize, stride: usize, cfg: &DetectorConfig) -> Vec<DetectionRecord> {
    let s = heads.cls.shape();
    let (k, m, n) = (s[1], s[2], s[3]);
    let plane = m * n;
    let at = |t: &Tensor, ch: usize, c: usize, loc: usize| t.data()[(b * ch + c) * plane + loc];
    let mut cands = Vec::new();
    for loc in 0..plane {
        if at(&heads.active, 1, 0, loc) < 0.5 {
            continue;
        }
        let (cls, p) = (0..k)
            .map(|c| (c, at(&heads.cls, k, c, loc)))
            .fold((0, f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
        if !(p > cfg.conf_threshold) {
            continue;
        }
        let enc = BoxEncoding {
            l: std::array::from_fn(|c| at(&heads.l, 4, c, loc)),
            s: std::array::from_fn(|c| at(&heads.s, 4, c, loc)),
            r: at(&heads.r, 1, 0, loc),
        };
        let (i, j) = (loc / n, loc % n);
        let Ok(obb) = decode_obb_lenient(&enc, cell_center(i, j, stride), cls as u32) else {
            continue;
        };
        if let Ok(d) = DetectionRecord::new(obb, p.min(MAX_SCORE)) {
            cands.push(d);
        }
    }
    nms(&cands, cfg.nms_threshold)
}

pub fn infer_batch(model: &Detector, batch: &Batch, cfg: &DetectorConfig) -> Result<Vec<Vec<DetectionRecord>>> {
    let heads = head_outputs(model, batch)?;
    Ok((0..batch.len()).map(|b| decode_detections(&heads, b, model.stride, cfg)).collect())
}

pub fn infer(model: &Detector, sample: &PreparedSample, cfg: &DetectorConfig) -> Result<Vec<DetectionRecord>> {
    let batch = make_batch(&[sample], &[(false, false)])?;
    Ok(infer_batch(model, &batch, cfg)?.pop().unwrap_or_default())
}

/// Runs samples in parallel on the current rayon pool; results keep input
/// order.
pub fn infer_all(model: &Detector, samples: &[PreparedSample], cfg: &DetectorConfig) -> Result<Vec<Vec<DetectionRecord>>> {
    samples.par_iter().map(|s| infer(model, s, cfg)).collect()
}

/// AP at IoU 0.5 over `samples`.
pub fn evaluate(model: &Detector, samples: &[PreparedSample], cfg: &DetectorConfig) -> Result<(f64, PrCurve)> {
    let dets = infer_all(model, samples, cfg)?;
    let images: Vec<EvalImage> = dets
        .into_iter()
        .zip(samples)
        .map(|(detections, s)| EvalImage {
            detections,
            ground_truth: s.annotations.clone(),
        })
        .collect();
    Ok(average_precision(&images, ApOptions::default()))
}
