use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::obb::ObbAnnotation;
use super::polygon::polygon_iou;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub obb: ObbAnnotation,
    pub score: f64,
}

impl DetectionRecord {
    pub fn new(obb: ObbAnnotation, score: f64) -> Result<Self> {
        obb.validate()?;
        if !(score > 0.0 && score < 1.0) {
            return Err(Error::Validation(format!("score {score} outside (0, 1)")));
        }
        Ok(DetectionRecord { obb, score })
    }
}

/// Descending score, ties broken by ascending `(xc, yc, w, h, theta)`.
pub fn score_order(a: &DetectionRecord, b: &DetectionRecord) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| {
        a.obb
            .geometry_key()
            .iter()
            .zip(b.obb.geometry_key().iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Greedy suppression with rotated IoU. Boxes of different classes never
/// suppress each other.
pub fn nms(dets: &[DetectionRecord], iou_threshold: f64) -> Vec<DetectionRecord> {
    let mut order: Vec<DetectionRecord> = dets.to_vec();
    order.sort_by(score_order);
    let mut kept: Vec<DetectionRecord> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.obb.class_id == d.obb.class_id && polygon_iou(&k.obb, &d.obb) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(xc: f64, yc: f64, score: f64) -> DetectionRecord {
        DetectionRecord::new(ObbAnnotation::new(0, xc, yc, 10.0, 5.0, 30.0).unwrap(), score).unwrap()
    }

    #[test]
    fn identical_boxes_keep_best() {
        let out = nms(&[det(5.0, 5.0, 0.8), det(5.0, 5.0, 0.9)], 0.45);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn disjoint_boxes_survive() {
        let out = nms(&[det(5.0, 5.0, 0.8), det(50.0, 5.0, 0.9)], 0.45);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn score_ties_are_ordered_by_geometry() {
        let out = nms(&[det(9.0, 0.0, 0.5), det(1.0, 0.0, 0.5)], 0.99);
        assert_eq!(out[0].obb.xc, 1.0);
    }

    #[test]
    fn score_must_be_open_unit() {
        let o = ObbAnnotation::new(0, 0.0, 0.0, 1.0, 1.0, 0.0).unwrap();
        assert!(DetectionRecord::new(o, 1.0).is_err());
        assert!(DetectionRecord::new(o, 0.0).is_err());
    }

    /// Quadratic reference: a box survives iff no higher-ranked survivor
    /// overlaps it, evaluated by scanning the full ranked list each time.
    fn reference_nms(dets: &[DetectionRecord], thr: f64) -> Vec<DetectionRecord> {
        let n = dets.len();
        let rank = |i: usize| (0..n).filter(|&j| score_order(&dets[j], &dets[i]).is_lt()).count();
        let mut by_rank: Vec<usize> = (0..n).collect();
        by_rank.sort_by_key(|&i| rank(i));
        let mut alive = vec![true; n];
        for a in 0..n {
            let i = by_rank[a];
            if !alive[i] {
                continue;
            }
            for &j in &by_rank[a + 1..] {
                if dets[i].obb.class_id == dets[j].obb.class_id
                    && polygon_iou(&dets[i].obb, &dets[j].obb) > thr
                {
                    alive[j] = false;
                }
            }
        }
        by_rank.into_iter().filter(|&i| alive[i]).map(|i| dets[i]).collect()
    }

    #[test]
    fn matches_reference_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..20 {
            let dets: Vec<DetectionRecord> = (0..50)
                .map(|_| {
                    let o = ObbAnnotation::new(
                        rng.random_range(0..2),
                        rng.random_range(0.0..60.0),
                        rng.random_range(0.0..60.0),
                        rng.random_range(4.0..20.0),
                        rng.random_range(4.0..20.0),
                        rng.random_range(-90.0..90.0),
                    )
                    .unwrap();
                    DetectionRecord::new(o, rng.random_range(0.01..0.99)).unwrap()
                })
                .collect();
            let got = nms(&dets, 0.45);
            assert_eq!(got, reference_nms(&dets, 0.45));
            for (i, a) in got.iter().enumerate() {
                for b in &got[i + 1..] {
                    if a.obb.class_id == b.obb.class_id {
                        assert!(polygon_iou(&a.obb, &b.obb) <= 0.45);
                    }
                }
            }
        }
    }
}
