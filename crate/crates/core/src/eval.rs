//! Detection matching at a rotated-IoU threshold, precision/recall, all-point
//! average precision and PR-curve CSV files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{polygon_iou, score_order, DetectionRecord, ObbAnnotation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedDetection {
    /// Position in the caller's detection slice.
    pub index: usize,
    pub score: f64,
    pub tp: bool,
    /// Ground-truth index claimed by this detection.
    pub gt: Option<usize>,
}

/// Matching of one image, detections in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub detections: Vec<MatchedDetection>,
    pub num_gt: usize,
    pub false_negatives: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.detections.iter().filter(|d| d.tp).count()
    }

    pub fn false_positives(&self) -> usize {
        self.detections.len() - self.true_positives()
    }
}

/// Greedy matching in score order: each detection takes the unmatched
/// same-class ground truth with the highest IoU (lowest index on ties) and is
/// a true positive iff that IoU reaches `iou_threshold`.
pub fn match_detections(dets: &[DetectionRecord], gts: &[ObbAnnotation], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| score_order(&dets[a], &dets[b]).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class_id != d.obb.class_id {
                continue;
            }
            let iou = polygon_iou(&d.obb, g);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        let hit = best.filter(|&(_, iou)| iou >= iou_threshold);
        if let Some((j, _)) = hit {
            taken[j] = true;
        }
        out.push(MatchedDetection {
            index: i,
            score: d.score,
            tp: hit.is_some(),
            gt: hit.map(|(j, _)| j),
        });
    }
    let matched = taken.iter().filter(|&&t| t).count();
    MatchResult {
        detections: out,
        num_gt: gts.len(),
        false_negatives: gts.len() - matched,
    }
}

/// `(TP/(TP+FP), TP/(TP+FN))`, each 0 when its denominator is 0.
pub fn precision_recall(m: &MatchResult) -> (f64, f64) {
    pr_from_counts(m.true_positives(), m.false_positives(), m.false_negatives)
}

pub fn pr_from_counts(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    (p, r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Points in descending threshold order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ApOptions {
    /// Replace each precision by the maximum precision at equal or higher
    /// recall before summing. Off by default.
    pub interpolate: bool,
}

/// One evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub detections: Vec<DetectionRecord>,
    pub ground_truth: Vec<ObbAnnotation>,
}

pub const AP_IOU: f64 = 0.5;

/// Sweeps the threshold over the distinct detection scores (descending) and
/// sums `P(k) * (R(k) - R(k-1))` with `R(0) = 0`. Returns 0 when there is no
/// ground truth.
pub fn average_precision(images: &[EvalImage], opts: ApOptions) -> (f64, PrCurve) {
    let num_gt: usize = images.iter().map(|im| im.ground_truth.len()).sum();
    if num_gt == 0 {
        log::warn!("average precision requested with no ground truth; reporting 0");
        return (0.0, PrCurve::default());
    }
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for im in images {
        let m = match_detections(&im.detections, &im.ground_truth, AP_IOU);
        scored.extend(m.detections.iter().map(|d| (d.score, d.tp)));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let thr = scored[i].0;
        while i < scored.len() && scored[i].0 == thr {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (p, r) = pr_from_counts(tp, fp, num_gt - tp);
        points.push(PrPoint {
            threshold: thr,
            precision: p,
            recall: r,
        });
    }
    let curve = PrCurve { points };
    (sum_ap(&curve, opts), curve)
}

fn sum_ap(curve: &PrCurve, opts: ApOptions) -> f64 {
    let mut prec: Vec<f64> = curve.points.iter().map(|p| p.precision).collect();
    if opts.interpolate {
        for k in (0..prec.len().saturating_sub(1)).rev() {
            prec[k] = prec[k].max(prec[k + 1]);
        }
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, pt) in prec.iter().zip(&curve.points) {
        ap += p * (pt.recall - prev_r);
        prev_r = pt.recall;
    }
    ap
}

/// Per-class AP averaged over the classes present in the ground truth.
pub fn mean_average_precision(images: &[EvalImage], opts: ApOptions) -> f64 {
    let classes: BTreeSet<u32> = images
        .iter()
        .flat_map(|im| im.ground_truth.iter().map(|g| g.class_id))
        .collect();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let per: Vec<EvalImage> = images
                .iter()
                .map(|im| EvalImage {
                    detections: im.detections.iter().filter(|d| d.obb.class_id == c).copied().collect(),
                    ground_truth: im.ground_truth.iter().filter(|g| g.class_id == c).copied().collect(),
                })
                .collect();
            average_precision(&per, opts).0
        })
        .sum();
    total / classes.len() as f64
}

pub fn format_pr_csv(curve: &PrCurve) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for p in &curve.points {
        writeln!(s, "{:.6},{:.6},{:.6}", p.threshold, p.precision, p.recall).unwrap();
    }
    s
}

pub fn emit_pr_csv(curve: &PrCurve, path: &Path) -> Result<()> {
    std::fs::write(path, format_pr_csv(curve)).map_err(|e| Error::io(path, e))
}

pub fn parse_pr_csv(text: &str, path: &Path) -> Result<PrCurve> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "threshold,precision,recall")) => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "expected header threshold,precision,recall".into(),
            })
        }
    }
    let mut points = Vec::new();
    for (i, line) in lines {
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let vals: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| perr(format!("bad row {line:?}")))?;
        let [threshold, precision, recall] = vals[..] else {
            return Err(perr(format!("expected 3 columns in {line:?}")));
        };
        points.push(PrPoint {
            threshold,
            precision,
            recall,
        });
    }
    Ok(PrCurve { points })
}
