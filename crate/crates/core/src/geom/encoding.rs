use super::obb::{normalize_angle, obb_to_hbb, ObbAnnotation, Point};
use crate::error::{Error, Result};

/// Box representation relative to a sampling point inside the box's HBB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxEncoding {
    /// Distances to the left, top, right and bottom HBB edges.
    pub l: [f64; 4],
    /// Offset of the OBB vertex lying on each HBB edge, measured from the
    /// edge's starting corner (clockwise from top-left) and normalized by
    /// the edge length.
    pub s: [f64; 4],
    /// area(OBB) / area(HBB).
    pub r: f64,
}

/// Areas derived from two sets of edge distances around a shared point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HbbIou {
    pub iou: f64,
    pub area: f64,
    pub area_hat: f64,
    pub overlap: f64,
    pub union: f64,
    /// Area of the smallest HBB enclosing both boxes.
    pub circumscribed: f64,
}

pub fn hbb_iou_from_distances(l: &[f64; 4], l_hat: &[f64; 4]) -> HbbIou {
    let area = (l[0] + l[2]) * (l[1] + l[3]);
    let area_hat = (l_hat[0] + l_hat[2]) * (l_hat[1] + l_hat[3]);
    let overlap = (l[0].min(l_hat[0]) + l[2].min(l_hat[2])) * (l[1].min(l_hat[1]) + l[3].min(l_hat[3]));
    let circumscribed =
        (l[0].max(l_hat[0]) + l[2].max(l_hat[2])) * (l[1].max(l_hat[1]) + l[3].max(l_hat[3]));
    let union = area + area_hat - overlap;
    let iou = if union > 0.0 { overlap / union } else { 0.0 };
    HbbIou {
        iou,
        area,
        area_hat,
        overlap,
        union,
        circumscribed,
    }
}

/// Encodes `obb` relative to `point`, which must lie inside its HBB.
pub fn encode_obb(obb: &ObbAnnotation, point: Point) -> Result<BoxEncoding> {
    obb.validate()?;
    let hbb = obb_to_hbb(obb);
    if !hbb.contains(point) {
        return Err(Error::Validation(format!(
            "sampling point ({}, {}) outside HBB {hbb:?}",
            point.x, point.y
        )));
    }
    let (wd, ht) = (hbb.width(), hbb.height());
    let v = obb.vertices();
    let tol = 1e-9 * wd.max(ht).max(1.0);

    // Vertex on each HBB edge; when an edge holds a whole OBB side (axis
    // aligned) pick the one at the edge's starting corner so s = 0.
    let pick = |primary: &dyn Fn(&Point) -> f64, secondary: &dyn Fn(&Point) -> f64| -> Point {
        let best = v.iter().map(primary).fold(f64::INFINITY, f64::min);
        *v.iter()
            .filter(|p| primary(p) <= best + tol)
            .min_by(|a, b| secondary(a).total_cmp(&secondary(b)))
            .expect("four vertices")
    };
    let top = pick(&|p| p.y, &|p| p.x);
    let right = pick(&|p| -p.x, &|p| p.y);
    let bottom = pick(&|p| -p.y, &|p| -p.x);
    let left = pick(&|p| p.x, &|p| -p.y);

    let s = [
        ((top.x - hbb.x0) / wd).clamp(0.0, 1.0),
        ((right.y - hbb.y0) / ht).clamp(0.0, 1.0),
        ((hbb.x1 - bottom.x) / wd).clamp(0.0, 1.0),
        ((hbb.y1 - left.y) / ht).clamp(0.0, 1.0),
    ];
    Ok(BoxEncoding {
        l: [
            point.x - hbb.x0,
            point.y - hbb.y0,
            hbb.x1 - point.x,
            hbb.y1 - point.y,
        ],
        s,
        r: (obb.area() / hbb.area()).min(1.0),
    })
}

fn vertices_from(enc: &BoxEncoding, point: Point, s: [f64; 4]) -> [Point; 4] {
    let [l1, l2, l3, l4] = enc.l;
    let (x0, y0, x1, y1) = (point.x - l1, point.y - l2, point.x + l3, point.y + l4);
    let (wd, ht) = (l1 + l3, l2 + l4);
    [
        Point::new(x0 + s[0] * wd, y0),
        Point::new(x1, y0 + s[1] * ht),
        Point::new(x1 - s[2] * wd, y1),
        Point::new(x0, y1 - s[3] * ht),
    ]
}

fn rectangle_from(v: [Point; 4], class_id: u32) -> Result<ObbAnnotation> {
    let center = Point::new(
        (v[0].x + v[1].x + v[2].x + v[3].x) / 4.0,
        (v[0].y + v[1].y + v[2].y + v[3].y) / 4.0,
    );
    let side = v[1].sub(v[0]);
    let w = side.x.hypot(side.y);
    let area = v[1].sub(v[0]).cross(v[2].sub(v[1])).abs();
    if w <= 0.0 || area <= 0.0 {
        return Err(Error::Validation("decoded box is degenerate".into()));
    }
    let theta = normalize_angle(side.y.atan2(side.x).to_degrees());
    ObbAnnotation::new(class_id, center.x, center.y, w, area / w, theta).map(|o| o.canonical())
}

/// Inverse of [`encode_obb`]. Rejects offsets that do not describe a
/// parallelogram (`s1 != s3` or `s2 != s4` beyond 1e-6).
pub fn decode_obb(enc: &BoxEncoding, point: Point, class_id: u32) -> Result<ObbAnnotation> {
    if enc.l.iter().any(|&d| d < 0.0) {
        return Err(Error::Validation(format!("negative distance in {:?}", enc.l)));
    }
    if (enc.s[0] - enc.s[2]).abs() > 1e-6 || (enc.s[1] - enc.s[3]).abs() > 1e-6 {
        return Err(Error::Validation(format!(
            "offsets {:?} do not form a parallelogram",
            enc.s
        )));
    }
    rectangle_from(vertices_from(enc, point, enc.s), class_id)
}

/// Decoder for network outputs: averages opposite offsets and fits a
/// rectangle of equal area to the resulting parallelogram.
pub fn decode_obb_lenient(enc: &BoxEncoding, point: Point, class_id: u32) -> Result<ObbAnnotation> {
    let a = ((enc.s[0] + enc.s[2]) / 2.0).clamp(0.0, 1.0);
    let b = ((enc.s[1] + enc.s[3]) / 2.0).clamp(0.0, 1.0);
    let l = enc.l.map(|d| d.max(0.0));
    rectangle_from(vertices_from(&BoxEncoding { l, ..*enc }, point, [a, b, a, b]), class_id)
}
