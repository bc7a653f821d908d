use super::obb::{ObbAnnotation, Point};

const ORIENT_EPS: f64 = 1e-9;

/// Unsigned shoelace area.
pub fn shoelace_area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    (0..n)
        .map(|i| poly[i].cross(poly[(i + 1) % n]))
        .sum::<f64>()
        / 2.0
}

/// Clips `subject` against every edge half-plane of the convex polygon
/// `clip` (Sutherland-Hodgman).
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut clip = clip.to_vec();
    if signed_area(&clip) < 0.0 {
        clip.reverse();
    }
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = b.sub(a);
        let side = |p: Point| edge.cross(p.sub(a));
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            let (cin, pin) = (sc >= -ORIENT_EPS, sp >= -ORIENT_EPS);
            if cin != pin {
                let t = sp / (sp - sc);
                out.push(Point::new(
                    prev.x + t * (cur.x - prev.x),
                    prev.y + t * (cur.y - prev.y),
                ));
            }
            if cin {
                out.push(cur);
            }
        }
    }
    out
}

pub fn convex_intersection_area(a: &[Point], b: &[Point]) -> f64 {
    shoelace_area(&clip_convex(a, b))
}

/// Exact IoU of two rotated rectangles; 0 when either is degenerate.
pub fn polygon_iou(a: &ObbAnnotation, b: &ObbAnnotation) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if !(aa > 0.0 && ab > 0.0) {
        return 0.0;
    }
    let inter = convex_intersection_area(&a.vertices(), &b.vertices()).min(aa.min(ab));
    let union = aa + ab - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::ObbAnnotation;
    use proptest::prelude::*;

    fn obb(xc: f64, yc: f64, w: f64, h: f64, t: f64) -> ObbAnnotation {
        ObbAnnotation::new(0, xc, yc, w, h, t).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = obb(5.0, 5.0, 6.0, 3.0, 17.0);
        assert!((polygon_iou(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(polygon_iou(&a, &obb(50.0, 5.0, 6.0, 3.0, 17.0)), 0.0);
    }

    #[test]
    fn swapped_sides_are_the_same_box() {
        let a = obb(0.0, 0.0, 8.0, 3.0, 20.0);
        let b = obb(0.0, 0.0, 3.0, 8.0, -70.0);
        assert!((polygon_iou(&a, &b) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn half_shifted_squares() {
        let a = obb(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = obb(1.0, 0.0, 2.0, 2.0, 0.0);
        assert!((polygon_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn shared_edge_has_zero_overlap() {
        let a = obb(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = obb(2.0, 0.0, 2.0, 2.0, 0.0);
        assert!(polygon_iou(&a, &b).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn iou_bounded_and_symmetric(
            x in -10.0f64..10.0, y in -10.0f64..10.0,
            w1 in 0.5f64..20.0, h1 in 0.5f64..20.0, t1 in -90.0f64..90.0,
            w2 in 0.5f64..20.0, h2 in 0.5f64..20.0, t2 in -90.0f64..90.0,
        ) {
            let a = obb(0.0, 0.0, w1, h1, t1);
            let b = obb(x, y, w2, h2, t2);
            let ab = polygon_iou(&a, &b);
            let ba = polygon_iou(&b, &a);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-9);
        }
    }
}
