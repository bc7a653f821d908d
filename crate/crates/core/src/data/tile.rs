//! Overlapping fixed-size tiling with annotation clipping.

use serde::{Deserialize, Serialize};

use super::scene::{ManifestEntry, SceneSample};
use crate::error::{Error, Result};
use crate::geom::{clip_convex, shoelace_area, ObbAnnotation, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileSpec {
    pub tile_size: usize,
    pub overlap: usize,
    /// Clipped labels keep at least this fraction of their area or are dropped.
    pub min_visible_fraction: f64,
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec {
            tile_size: 800,
            overlap: 200,
            min_visible_fraction: 0.4,
        }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || self.overlap == 0 || self.overlap >= self.tile_size {
            return Err(Error::Config(format!(
                "tile: need 0 < overlap ({}) < tile_size ({})",
                self.overlap, self.tile_size
            )));
        }
        if !(0.0..=1.0).contains(&self.min_visible_fraction) {
            return Err(Error::Config(format!(
                "tile.min_visible_fraction {} outside [0, 1]",
                self.min_visible_fraction
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.tile_size - self.overlap
    }
}

/// Origins `0, s, 2s, ...` with the last tile shifted back so it ends at
/// `extent`.
pub fn tile_origins(extent: usize, tile: usize, overlap: usize) -> Result<Vec<usize>> {
    if tile == 0 || overlap >= tile {
        return Err(Error::Config(format!("bad tiling {tile}/{overlap}")));
    }
    if tile > extent {
        return Err(Error::Validation(format!("tile {tile} larger than extent {extent}")));
    }
    let stride = tile - overlap;
    let mut out = Vec::new();
    let mut o = 0;
    while o + tile < extent {
        out.push(o);
        o += stride;
    }
    out.push(extent - tile);
    Ok(out)
}

/// Clips `obb` to the window `[x0, x0+w) x [y0, y0+h)` and returns it in
/// window coordinates. Fully visible boxes are translated unchanged; clipped
/// ones are refitted in their own axes. Returns `None` when less than
/// `min_visible` of the area survives or the refitted center leaves the window.
pub fn clip_to_window(obb: &ObbAnnotation, x0: f64, y0: f64, w: f64, h: f64, min_visible: f64) -> Option<ObbAnnotation> {
    let verts = obb.vertices();
    let inside = |p: &Point| p.x >= x0 && p.x <= x0 + w && p.y >= y0 && p.y <= y0 + h;
    if verts.iter().all(inside) {
        return Some(obb.translated(-x0, -y0));
    }
    let window = [
        Point::new(x0, y0),
        Point::new(x0 + w, y0),
        Point::new(x0 + w, y0 + h),
        Point::new(x0, y0 + h),
    ];
    let clipped = clip_convex(&verts, &window);
    let frac = shoelace_area(&clipped) / obb.area();
    if clipped.len() < 3 || frac < min_visible || frac <= 0.0 {
        return None;
    }
    let (s, c) = obb.theta.to_radians().sin_cos();
    let local: Vec<(f64, f64)> = clipped
        .iter()
        .map(|p| {
            let (dx, dy) = (p.x - obb.xc, p.y - obb.yc);
            (dx * c + dy * s, -dx * s + dy * c)
        })
        .collect();
    let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| {
        local.iter().map(pick).fold(init, f)
    };
    let (u0, u1) = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
    let (v0, v1) = (fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
    let (uc, vc) = ((u0 + u1) / 2.0, (v0 + v1) / 2.0);
    let xc = obb.xc + uc * c - vc * s;
    let yc = obb.yc + uc * s + vc * c;
    if !(xc >= x0 && xc < x0 + w && yc >= y0 && yc < y0 + h) {
        return None;
    }
    ObbAnnotation::new(obb.class_id, xc - x0, yc - y0, u1 - u0, v1 - v0, obb.theta).ok()
}

/// Cuts a scene into tiles in row-major order. Tile ids are
/// `<scene>_t<index>`.
pub fn tile_scene(sample: &SceneSample, spec: &TileSpec) -> Result<(Vec<SceneSample>, Vec<ManifestEntry>)> {
    spec.validate()?;
    let t = spec.tile_size;
    let xs = tile_origins(sample.width(), t, spec.overlap)?;
    let ys = tile_origins(sample.height(), t, spec.overlap)?;
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    let mut entries = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let id = format!("{}_t{:03}", sample.id, tiles.len());
            let anns = sample
                .annotations
                .iter()
                .filter_map(|a| clip_to_window(a, x as f64, y as f64, t as f64, t as f64, spec.min_visible_fraction))
                .collect();
            tiles.push(SceneSample::new(
                id.clone(),
                sample.rgb.crop(x, y, t, t),
                sample.hmap.crop(x, y, t, t),
                anns,
            )?);
            entries.push(ManifestEntry {
                id,
                source: sample.id.clone(),
                x,
                y,
                width: t,
                height: t,
            });
        }
    }
    Ok((tiles, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pnm::{HeightMap, RgbImage};
    use proptest::prelude::*;

    #[test]
    fn clamped_origins() {
        let o = tile_origins(5184, 1024, 200).unwrap();
        assert_eq!(o, vec![0, 824, 1648, 2472, 3296, 4120, 4160]);
        assert_eq!(tile_origins(1024, 1024, 200).unwrap(), vec![0]);
        assert_eq!(tile_origins(1848, 1024, 200).unwrap(), vec![0, 824]);
        assert!(tile_origins(500, 1024, 200).is_err());
        assert!(tile_origins(5000, 200, 200).is_err());
    }

    fn scene(w: usize, h: usize, anns: Vec<ObbAnnotation>) -> SceneSample {
        let mut rgb = RgbImage::new(w, h);
        for (i, v) in rgb.data.iter_mut().enumerate() {
            *v = (i % 251) as u8;
        }
        let mut hm = HeightMap::new(w, h, 0.01, 0.0);
        for (i, v) in hm.data.iter_mut().enumerate() {
            *v = (i % 65521) as u16;
        }
        SceneSample::new("sc", rgb, hm, anns).unwrap()
    }

    #[test]
    fn whole_scene_tile_is_identity() {
        let a = ObbAnnotation::new(0, 10.0, 12.0, 8.0, 4.0, 30.0).unwrap();
        let s = scene(64, 64, vec![a]);
        let spec = TileSpec {
            tile_size: 64,
            overlap: 10,
            min_visible_fraction: 0.4,
        };
        let (tiles, man) = tile_scene(&s, &spec).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!((tiles[0].rgb.clone(), tiles[0].annotations.clone()), (s.rgb.clone(), s.annotations.clone()));
        assert_eq!((man[0].x, man[0].y), (0, 0));
    }

    #[test]
    fn tiles_stay_aligned_and_back_map() {
        let inner = ObbAnnotation::new(0, 50.3, 20.7, 9.0, 4.0, -61.0).unwrap();
        let s = scene(100, 60, vec![inner]);
        let spec = TileSpec {
            tile_size: 40,
            overlap: 10,
            min_visible_fraction: 0.4,
        };
        let (tiles, man) = tile_scene(&s, &spec).unwrap();
        assert_eq!(tiles.len(), 3 * 2);
        let mut found = 0;
        for (t, e) in tiles.iter().zip(&man) {
            for y in 0..40 {
                for x in 0..40 {
                    assert_eq!(t.rgb.get(x, y), s.rgb.get(x + e.x, y + e.y));
                    assert_eq!(t.hmap.data[y * 40 + x], s.hmap.data[(y + e.y) * 100 + x + e.x]);
                }
            }
            for a in &t.annotations {
                let back = a.translated(e.x as f64, e.y as f64);
                if inner.vertices().iter().all(|p| {
                    p.x >= e.x as f64 && p.x <= (e.x + 40) as f64 && p.y >= e.y as f64 && p.y <= (e.y + 40) as f64
                }) {
                    found += 1;
                    assert_eq!((a.w, a.h, a.theta), (inner.w, inner.h, inner.theta));
                    assert!((back.xc - inner.xc).abs() < 1e-9 && (back.yc - inner.yc).abs() < 1e-9);
                }
            }
        }
        assert!(found >= 1);
    }

    #[test]
    fn clipping_keeps_or_drops_by_visibility() {
        // axis-aligned 10x4 box over x in [32, 42]: 80% left of x = 40
        let a = ObbAnnotation::new(0, 37.0, 20.0, 10.0, 4.0, 0.0).unwrap();
        let left = clip_to_window(&a, 0.0, 0.0, 40.0, 40.0, 0.4).unwrap();
        assert!((left.w - 8.0).abs() < 1e-9 && (left.xc - 36.0).abs() < 1e-9 && left.h == 4.0);
        assert!(clip_to_window(&a, 40.0, 0.0, 40.0, 40.0, 0.4).is_none());
        let right = clip_to_window(&a, 40.0, 0.0, 40.0, 40.0, 0.15).unwrap();
        assert!((right.w - 2.0).abs() < 1e-9 && (right.xc - 1.0).abs() < 1e-9);
        assert!(clip_to_window(&a, 100.0, 0.0, 40.0, 40.0, 0.0).is_none());
    }

    fn covered(extent: usize, tile: usize, overlap: usize) -> Vec<u32> {
        let mut hits = vec![0u32; extent];
        for o in tile_origins(extent, tile, overlap).unwrap() {
            assert!(o + tile <= extent);
            for h in &mut hits[o..o + tile] {
                *h += 1;
            }
        }
        hits
    }

    #[test]
    fn large_tile_sizes_cover_every_pixel() {
        for (extent, tile, overlap) in [(5184, 640, 200), (5184, 800, 200), (5184, 1024, 200), (6000, 800, 400), (3888, 1024, 200)] {
            let hits = covered(extent, tile, overlap);
            assert!(hits.iter().all(|&h| h >= 1));
            let origins = tile_origins(extent, tile, overlap).unwrap();
            for w in origins.windows(2) {
                // the overlap band between consecutive tiles is covered twice
                for px in w[1]..(w[0] + tile) {
                    assert!(hits[px] >= 2);
                }
            }
            assert_eq!(*origins.last().unwrap() + tile, extent);
        }
    }

    proptest! {
        #[test]
        fn coverage_property(extent in 50usize..3000, tile in 20usize..400, frac in 0.05f64..0.9) {
            prop_assume!(tile <= extent);
            let overlap = ((tile as f64 * frac) as usize).clamp(1, tile - 1);
            let hits = covered(extent, tile, overlap);
            prop_assert!(hits.iter().all(|&h| h >= 1));
            let o = tile_origins(extent, tile, overlap).unwrap();
            prop_assert!(o.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= tile - overlap));
        }
    }
}
