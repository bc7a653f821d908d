use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

/// Wraps an angle in degrees into `[-90, 90)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = (theta + 90.0).rem_euclid(180.0) - 90.0;
    if t >= 90.0 {
        -90.0
    } else {
        t
    }
}

/// One labelled object: center, side lengths in pixels, rotation in
/// degrees in `[-90, 90)`. Image coordinates (x right, y down); a positive
/// angle rotates the width axis from +x towards +y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObbAnnotation {
    pub class_id: u32,
    pub xc: f64,
    pub yc: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl ObbAnnotation {
    pub fn new(class_id: u32, xc: f64, yc: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let o = ObbAnnotation {
            class_id,
            xc,
            yc,
            w,
            h,
            theta,
        };
        o.validate()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.xc, self.yc, self.w, self.h, self.theta]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Validation(format!("degenerate box {self:?}")));
        }
        if !(-90.0..90.0).contains(&self.theta) {
            return Err(Error::Validation(format!(
                "angle {} outside [-90, 90)",
                self.theta
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        Point::new(self.xc, self.yc)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners in rotation order starting from the local (-w/2, -h/2) corner.
    pub fn vertices(&self) -> [Point; 4] {
        let (s, c) = self.theta.to_radians().sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(x, y)| {
            Point::new(self.xc + x * c - y * s, self.yc + x * s + y * c)
        })
    }

    /// Unique representation of the same rectangle: `w >= h`, angle in
    /// `[-90, 90)`, squares folded into `[-45, 45)`.
    pub fn canonical(&self) -> Self {
        let mut o = *self;
        if o.h > o.w {
            std::mem::swap(&mut o.w, &mut o.h);
            o.theta += 90.0;
        }
        o.theta = normalize_angle(o.theta);
        if o.w == o.h {
            o.theta = (o.theta + 45.0).rem_euclid(90.0) - 45.0;
        }
        o
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        ObbAnnotation {
            xc: self.xc + dx,
            yc: self.yc + dy,
            ..*self
        }
    }

    /// Lexicographic key used to break score ties deterministically.
    pub fn geometry_key(&self) -> [f64; 5] {
        [self.xc, self.yc, self.w, self.h, self.theta]
    }

    pub fn contains(&self, p: Point) -> bool {
        let (s, c) = self.theta.to_radians().sin_cos();
        let (dx, dy) = (p.x - self.xc, p.y - self.yc);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }
}

/// Axis-aligned box `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hbb {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Hbb {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }
}

/// Smallest axis-aligned rectangle containing the rotated corners.
pub fn obb_to_hbb(obb: &ObbAnnotation) -> Hbb {
    let v = obb.vertices();
    let fold = |f: fn(f64, f64) -> f64, init: f64, get: fn(&Point) -> f64| {
        v.iter().map(get).fold(init, f)
    };
    Hbb {
        x0: fold(f64::min, f64::INFINITY, |p| p.x),
        y0: fold(f64::min, f64::INFINITY, |p| p.y),
        x1: fold(f64::max, f64::NEG_INFINITY, |p| p.x),
        y1: fold(f64::max, f64::NEG_INFINITY, |p| p.y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_hbb() {
        let o = ObbAnnotation::new(0, 10.0, 20.0, 8.0, 4.0, 0.0).unwrap();
        assert_eq!(
            obb_to_hbb(&o),
            Hbb {
                x0: 6.0,
                y0: 18.0,
                x1: 14.0,
                y1: 22.0
            }
        );
    }

    #[test]
    fn rotated_square_hbb() {
        let o = ObbAnnotation::new(0, 0.0, 0.0, 10.0, 10.0, 45.0).unwrap();
        let h = obb_to_hbb(&o);
        assert!((h.width() - 10.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!((h.height() - 14.142135623730951).abs() < 1e-9);
    }

    #[test]
    fn minus_ninety_swaps_sides() {
        let a = obb_to_hbb(&ObbAnnotation::new(0, 5.0, 5.0, 12.0, 6.0, -90.0).unwrap());
        let b = obb_to_hbb(&ObbAnnotation::new(0, 5.0, 5.0, 6.0, 12.0, 0.0).unwrap());
        for (x, y) in [(a.x0, b.x0), (a.y0, b.y0), (a.x1, b.x1), (a.y1, b.y1)] {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn canonical_form() {
        let o = ObbAnnotation::new(0, 0.0, 0.0, 4.0, 9.0, 30.0).unwrap().canonical();
        assert_eq!((o.w, o.h, o.theta), (9.0, 4.0, -60.0));
        let sq = ObbAnnotation::new(0, 0.0, 0.0, 5.0, 5.0, 80.0).unwrap().canonical();
        assert!((sq.theta - -10.0).abs() < 1e-12);
        assert_eq!(normalize_angle(90.0), -90.0);
        assert_eq!(normalize_angle(-90.0), -90.0);
        assert_eq!(normalize_angle(270.0), -90.0);
    }

    #[test]
    fn rejects_invalid() {
        assert!(ObbAnnotation::new(0, 0.0, 0.0, 0.0, 1.0, 0.0).is_err());
        assert!(ObbAnnotation::new(0, 0.0, 0.0, 1.0, 1.0, 90.0).is_err());
        assert!(ObbAnnotation::new(0, f64::NAN, 0.0, 1.0, 1.0, 0.0).is_err());
    }
}
