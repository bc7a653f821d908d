//! Seeded synthetic parking scenes: clustered vehicles, foliage occluders that
//! hide vehicles in RGB but not in height, height dropouts that hide them in
//! height but not in RGB, and tents/bushes that mimic vehicles in height.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::pnm::{HeightMap, RgbImage};
use super::scene::SceneSample;
use crate::error::{Error, Result};
use crate::geom::{convex_intersection_area, ObbAnnotation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of vehicles requested per scene.
    pub vehicles: [usize; 2],
    /// Inclusive range of parking clusters per scene.
    pub clusters: [usize; 2],
    /// Gap between neighbouring vehicles in a row, pixels; smaller is denser.
    pub cluster_gap: [f64; 2],
    pub vehicle_length: [f64; 2],
    pub vehicle_width: [f64; 2],
    pub vehicle_height: [f64; 2],
    /// Per-vehicle probability of receiving an occluder.
    pub occluder_prob: f64,
    /// Fraction of occluders that are foliage (RGB-hiding); the rest are
    /// height dropouts (height-hiding).
    pub branch_fraction: f64,
    pub occluder_height: [f64; 2],
    /// Fraction of foliage pixels that return a canopy height.
    pub canopy_density: f64,
    pub tents: [usize; 2],
    pub tent_height: [f64; 2],
    /// Car-sized boxes at car heights (dumpsters, kiosks) that only colour
    /// separates from vehicles.
    pub boxes: [usize; 2],
    pub bushes: [usize; 2],
    pub bush_height: [f64; 2],
    /// Box-blur radius applied to the rendered surface heights.
    pub height_blur: usize,
    pub height_noise: f64,
    pub height_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 128,
            height: 128,
            vehicles: [6, 16],
            clusters: [1, 3],
            cluster_gap: [1.5, 4.0],
            vehicle_length: [14.0, 20.0],
            vehicle_width: [7.0, 9.0],
            vehicle_height: [1.4, 2.0],
            occluder_prob: 0.5,
            branch_fraction: 0.5,
            occluder_height: [6.0, 10.0],
            canopy_density: 0.3,
            tents: [1, 4],
            tent_height: [1.6, 2.6],
            boxes: [2, 6],
            bushes: [2, 6],
            bush_height: [0.8, 2.4],
            height_blur: 1,
            height_noise: 0.3,
            height_scale: 0.01,
            seed: 0,
        }
    }
}

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, r: &[T; 2]) -> Result<()> {
    if r[0] <= r[1] {
        Ok(())
    } else {
        Err(Error::Config(format!("synth.{name} range {r:?} is empty")))
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config("synth canvas must be at least 16x16".into()));
        }
        check_range("vehicles", &self.vehicles)?;
        check_range("clusters", &self.clusters)?;
        check_range("tents", &self.tents)?;
        check_range("boxes", &self.boxes)?;
        check_range("bushes", &self.bushes)?;
        for (n, r) in [
            ("cluster_gap", &self.cluster_gap),
            ("vehicle_length", &self.vehicle_length),
            ("vehicle_width", &self.vehicle_width),
            ("vehicle_height", &self.vehicle_height),
            ("occluder_height", &self.occluder_height),
            ("tent_height", &self.tent_height),
            ("bush_height", &self.bush_height),
        ] {
            check_range(n, r)?;
            if r[0] < 0.0 {
                return Err(Error::Config(format!("synth.{n} must be non-negative")));
            }
        }
        if self.clusters[0] == 0 && self.vehicles[1] > 0 {
            return Err(Error::Config("synth.clusters must be >= 1 when vehicles are requested".into()));
        }
        if self.vehicle_width[0] <= 0.0 || self.vehicle_length[0] < self.vehicle_width[1] {
            return Err(Error::Config("synth vehicle footprint must be non-degenerate, length >= width".into()));
        }
        for (n, p) in [
            ("occluder_prob", self.occluder_prob),
            ("branch_fraction", self.branch_fraction),
            ("canopy_density", self.canopy_density),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("synth.{n} = {p} outside [0, 1]")));
            }
        }
        if !(self.height_noise >= 0.0) || !(self.height_scale > 0.0) {
            return Err(Error::Config("synth height noise/scale invalid".into()));
        }
        Ok(())
    }
}

/// Per-scene generator bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthRecord {
    pub id: String,
    pub requested: usize,
    pub placed: usize,
    /// Vehicles with more than half their footprint under foliage.
    pub occluded_rgb: usize,
    /// Vehicles whose height signal was dropped.
    pub hidden_height: usize,
    pub tents: usize,
}

pub fn format_synth_log(records: &[SynthRecord]) -> String {
    let mut s = String::from("id,requested,placed,occluded_rgb,hidden_height,tents\n");
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.id, r.requested, r.placed, r.occluded_rgb, r.hidden_height, r.tents
        )
        .unwrap();
    }
    s
}

const PLACEMENT_RETRIES: usize = 40;

const CAR_COLORS: [[u8; 3]; 9] = [
    [235, 235, 232],
    [30, 30, 34],
    [160, 163, 168],
    [110, 112, 118],
    [170, 30, 35],
    [30, 60, 140],
    [20, 90, 60],
    [200, 170, 60],
    [90, 55, 40],
];

struct Canvas<'a> {
    rgb: &'a mut RgbImage,
    surface: &'a mut [f64],
}

/// Pixels whose centers fall inside `obb`, as `(x, y, u, v)` with `(u, v)`
/// the local coordinates along width/height.
fn footprint(obb: &ObbAnnotation, w: usize, h: usize) -> Vec<(usize, usize, f64, f64)> {
    let hb = crate::geom::obb_to_hbb(obb);
    let x0 = hb.x0.floor().max(0.0) as usize;
    let y0 = hb.y0.floor().max(0.0) as usize;
    let x1 = (hb.x1.ceil().max(0.0) as usize).min(w);
    let y1 = (hb.y1.ceil().max(0.0) as usize).min(h);
    let (s, c) = obb.theta.to_radians().sin_cos();
    let mut out = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f64 + 0.5 - obb.xc, y as f64 + 0.5 - obb.yc);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if u.abs() <= obb.w / 2.0 && v.abs() <= obb.h / 2.0 {
                out.push((x, y, u, v));
            }
        }
    }
    out
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], amp: i32) -> [u8; 3] {
    base.map(|c| (c as i32 + rng.random_range(-amp..=amp)).clamp(0, 255) as u8)
}

fn shade(c: [u8; 3], f: f64) -> [u8; 3] {
    c.map(|v| (v as f64 * f).round().clamp(0.0, 255.0) as u8)
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn inside_canvas(o: &ObbAnnotation, w: usize, h: usize) -> bool {
    o.vertices()
        .iter()
        .all(|p| p.x >= 1.0 && p.y >= 1.0 && p.x <= w as f64 - 1.0 && p.y <= h as f64 - 1.0)
}

/// Overlap test with a one-pixel margin so neighbours never touch.
fn collides(o: &ObbAnnotation, placed: &[ObbAnnotation]) -> bool {
    let grown = ObbAnnotation {
        w: o.w + 1.5,
        h: o.h + 1.5,
        ..*o
    };
    let gv = grown.vertices();
    placed.iter().any(|p| {
        let reach = (o.w + o.h + p.w + p.h) / 2.0 + 2.0;
        (p.xc - o.xc).hypot(p.yc - o.yc) < reach && convex_intersection_area(&gv, &p.vertices()) > 1e-9
    })
}

/// Generates `count` scenes named `<prefix><index>`. Scene `i` depends only
/// on `(cfg.seed, i)`.
pub fn synth_generate(cfg: &SynthConfig, count: usize, prefix: &str) -> Result<(Vec<SceneSample>, Vec<SynthRecord>)> {
    cfg.validate()?;
    let mut scenes = Vec::with_capacity(count);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let (s, r) = synth_scene(cfg, i as u64, &format!("{prefix}{i:05}"))?;
        scenes.push(s);
        records.push(r);
    }
    Ok((scenes, records))
}

pub fn synth_scene(cfg: &SynthConfig, index: u64, id: &str) -> Result<(SceneSample, SynthRecord)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (w, h) = (cfg.width, cfg.height);
    let mut rgb = RgbImage::new(w, h);
    let mut surface = vec![0.0; w * h];

    // ground: asphalt with a few stains
    let base = [rng.random_range(80..110u8); 3];
    for y in 0..h {
        for x in 0..w {
            rgb.put(x, y, jitter(&mut rng, base, 7));
        }
    }
    for _ in 0..rng.random_range(0..4) {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let rad = rng.random_range(4.0..14.0);
        let f = rng.random_range(0.8..1.15);
        for y in 0..h {
            for x in 0..w {
                if (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) < rad {
                    let px = rgb.get(x, y);
                    rgb.put(x, y, shade(px, f));
                }
            }
        }
    }

    // vehicles in parking rows
    let requested = rng.random_range(cfg.vehicles[0]..=cfg.vehicles[1]);
    let n_clusters = rng.random_range(cfg.clusters[0]..=cfg.clusters[1]).max(1);
    let mut vehicles: Vec<ObbAnnotation> = Vec::with_capacity(requested);
    let mut obstacles: Vec<ObbAnnotation> = Vec::new();
    let margin = cfg.vehicle_length[1] / 2.0 + 2.0;
    let span = |ext: usize| (margin, (ext as f64 - margin).max(margin + 1.0));
    for c in 0..n_clusters {
        let share = requested / n_clusters + usize::from(c < requested % n_clusters);
        let (lo, hi) = span(w);
        let cx = rng.random_range(lo..hi);
        let (lo, hi) = span(h);
        let cy = rng.random_range(lo..hi);
        let phi = rng.random_range(-90.0..90.0f64);
        let (ps, pc) = phi.to_radians().sin_cos();
        let gap = uniform(&mut rng, cfg.cluster_gap);
        let pitch = cfg.vehicle_width[1] + gap;
        let row_offset = cfg.vehicle_length[1] + gap + 1.0;
        let per_row = share.div_ceil(2).max(1);
        for k in 0..share {
            let (row, slot) = (k / per_row, k % per_row);
            let mut ok = false;
            for attempt in 0..PLACEMENT_RETRIES {
                let len = uniform(&mut rng, cfg.vehicle_length);
                let wid = uniform(&mut rng, cfg.vehicle_width);
                let spread = attempt as f64 * 0.5;
                let t = (slot as f64 - (per_row as f64 - 1.0) / 2.0) * pitch + rng.random_range(-0.5..0.5) * (1.0 + spread);
                let n = row as f64 * row_offset + rng.random_range(-0.5..0.5) * (1.0 + spread);
                let xc = cx + t * pc - n * ps;
                let yc = cy + t * ps + n * pc;
                let theta = phi + 90.0 + rng.random_range(-6.0..6.0);
                let flip = if rng.random_bool(0.5) { 180.0 } else { 0.0 };
                let Ok(o) = ObbAnnotation::new(0, xc, yc, len, wid, crate::geom::normalize_angle(theta + flip)) else {
                    continue;
                };
                if inside_canvas(&o, w, h) && !collides(&o, &vehicles) {
                    vehicles.push(o);
                    ok = true;
                    break;
                }
            }
            if !ok {
                log::debug!("{id}: could not place vehicle {k} of cluster {c}");
            }
        }
    }

    // tents: pale near-square canopies at vehicle-like heights
    let n_tents = rng.random_range(cfg.tents[0]..=cfg.tents[1]);
    let mut tents = Vec::new();
    for _ in 0..n_tents {
        for _ in 0..PLACEMENT_RETRIES {
            let side = rng.random_range(cfg.vehicle_length[0] * 0.7..cfg.vehicle_length[1]);
            let o = ObbAnnotation {
                class_id: 0,
                xc: rng.random_range(0.0..w as f64),
                yc: rng.random_range(0.0..h as f64),
                w: side,
                h: side * rng.random_range(0.5..0.95),
                theta: rng.random_range(-90.0..90.0),
            };
            if inside_canvas(&o, w, h) && !collides(&o, &vehicles) && !collides(&o, &tents) {
                tents.push(o);
                break;
            }
        }
    }
    let n_boxes = rng.random_range(cfg.boxes[0]..=cfg.boxes[1]);
    let mut boxes = Vec::new();
    for _ in 0..n_boxes {
        for _ in 0..PLACEMENT_RETRIES {
            let o = ObbAnnotation {
                class_id: 0,
                xc: rng.random_range(0.0..w as f64),
                yc: rng.random_range(0.0..h as f64),
                w: uniform(&mut rng, cfg.vehicle_length),
                h: uniform(&mut rng, cfg.vehicle_width),
                theta: rng.random_range(-90.0..90.0),
            };
            if inside_canvas(&o, w, h) && !collides(&o, &vehicles) && !collides(&o, &tents) && !collides(&o, &boxes) {
                boxes.push(o);
                break;
            }
        }
    }
    obstacles.extend(vehicles.iter().copied());
    obstacles.extend(tents.iter().copied());
    obstacles.extend(boxes.iter().copied());

    let canvas = Canvas {
        rgb: &mut rgb,
        surface: &mut surface,
    };

    // bushes: green blobs with mid heights, anywhere clear of vehicles
    let n_bushes = rng.random_range(cfg.bushes[0]..=cfg.bushes[1]);
    for _ in 0..n_bushes {
        let (bx, by) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let rad = rng.random_range(2.5..5.5);
        let probe = ObbAnnotation {
            class_id: 0,
            xc: bx,
            yc: by,
            w: 2.0 * rad,
            h: 2.0 * rad,
            theta: 0.0,
        };
        if collides(&probe, &obstacles) {
            continue;
        }
        let bh = uniform(&mut rng, cfg.bush_height);
        let green = [rng.random_range(40..70u8), rng.random_range(90..130u8), rng.random_range(35..60u8)];
        for y in 0..h {
            for x in 0..w {
                let d = (x as f64 + 0.5 - bx).hypot(y as f64 + 0.5 - by);
                if d < rad {
                    canvas.rgb.put(x, y, jitter(&mut rng, green, 18));
                    canvas.surface[y * w + x] = bh * (1.0 - 0.5 * (d / rad).powi(2));
                }
            }
        }
    }

    for t in &tents {
        let th = uniform(&mut rng, cfg.tent_height);
        let fabric = [rng.random_range(215..245u8); 3];
        for (x, y, _u, v) in footprint(t, w, h) {
            let ridge = 1.0 - (v.abs() / (t.h / 2.0)) * 0.35;
            let px = if v.abs() < 0.8 { shade(fabric, 0.85) } else { jitter(&mut rng, fabric, 6) };
            canvas.rgb.put(x, y, px);
            canvas.surface[y * w + x] = th * ridge;
        }
    }

    for b in &boxes {
        let bh = uniform(&mut rng, cfg.vehicle_height);
        let paint = [[60, 95, 55], [120, 70, 40], [150, 140, 120], [70, 80, 110]][rng.random_range(0..4)];
        for (x, y, u, v) in footprint(b, w, h) {
            // ribbed lid
            let px = if (u * 1.3).rem_euclid(3.0) < 1.0 { shade(paint, 0.8) } else { paint };
            let px = if v.abs() > b.h / 2.0 - 1.0 { shade(px, 0.7) } else { px };
            canvas.rgb.put(x, y, jitter(&mut rng, px, 6));
            canvas.surface[y * w + x] = bh;
        }
    }

    let mut vehicle_pixels = Vec::with_capacity(vehicles.len());
    for v in &vehicles {
        let body = CAR_COLORS[rng.random_range(0..CAR_COLORS.len())];
        let vh = uniform(&mut rng, cfg.vehicle_height);
        let fp = footprint(v, w, h);
        for &(x, y, u, vv) in &fp {
            let along = u / (v.w / 2.0);
            let across = vv.abs() / (v.h / 2.0);
            let mut px = if (0.25..0.55).contains(&along) && across < 0.85 {
                [35, 45, 60]
            } else if (-0.75..-0.55).contains(&along) && across < 0.85 {
                shade(body, 0.55)
            } else {
                body
            };
            if across > 0.85 {
                px = shade(px, 0.8);
            }
            canvas.rgb.put(x, y, jitter(&mut rng, px, 5));
            let profile = if along.abs() > 0.6 { 0.7 } else { 1.0 };
            canvas.surface[y * w + x] = vh * profile;
        }
        vehicle_pixels.push(fp);
    }

    // sensor footprint blur on surface heights
    let surface = box_blur(&surface, w, h, cfg.height_blur);
    let mut heights = surface;

    // occluder assignment
    let mut branch_of = Vec::new();
    let mut hidden_height = 0;
    for (vi, v) in vehicles.iter().enumerate() {
        if !rng.random_bool(cfg.occluder_prob) {
            continue;
        }
        if rng.random_bool(cfg.branch_fraction) {
            branch_of.push(vi);
        } else {
            hidden_height += 1;
            let grown = ObbAnnotation {
                w: v.w + 2.0,
                h: v.h + 2.0,
                ..*v
            };
            for (x, y, ..) in footprint(&grown, w, h) {
                heights[y * w + x] = 0.0;
            }
        }
    }

    let noise = Normal::new(0.0, cfg.height_noise.max(1e-12)).expect("finite std");
    for hgt in heights.iter_mut() {
        if cfg.height_noise > 0.0 {
            *hgt += noise.sample(&mut rng);
        }
        *hgt = hgt.max(0.0);
    }

    // foliage over selected vehicles: opaque in RGB, sparse canopy in height
    let mut foliage = vec![false; w * h];
    for &vi in &branch_of {
        let v = &vehicles[vi];
        let off = v.w * 0.15;
        let (fx, fy) = (v.xc + rng.random_range(-off..off), v.yc + rng.random_range(-off..off));
        let rad = v.w * rng.random_range(0.45..0.6);
        let (k, phase) = (rng.random_range(3..7) as f64, rng.random_range(0.0..std::f64::consts::TAU));
        let leaf = [rng.random_range(30..60u8), rng.random_range(80..120u8), rng.random_range(25..50u8)];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - fx, y as f64 + 0.5 - fy);
                let edge = rad * (1.0 + 0.15 * (k * dy.atan2(dx) + phase).sin());
                if dx.hypot(dy) < edge {
                    foliage[y * w + x] = true;
                    rgb.put(x, y, jitter(&mut rng, leaf, 22));
                    if rng.random_bool(cfg.canopy_density) {
                        heights[y * w + x] = uniform(&mut rng, cfg.occluder_height);
                    }
                }
            }
        }
    }

    let occluded_rgb = vehicle_pixels
        .iter()
        .filter(|fp| {
            let covered = fp.iter().filter(|(x, y, ..)| foliage[y * w + x]).count();
            !fp.is_empty() && covered * 2 > fp.len()
        })
        .count();

    let mut hmap = HeightMap::new(w, h, cfg.height_scale, 0.0);
    for y in 0..h {
        for x in 0..w {
            hmap.set_height(x, y, heights[y * w + x]);
        }
    }
    let annotations: Vec<ObbAnnotation> = vehicles.iter().map(|v| v.canonical()).collect();
    let record = SynthRecord {
        id: id.to_string(),
        requested,
        placed: annotations.len(),
        occluded_rgb,
        hidden_height,
        tents: tents.len(),
    };
    Ok((SceneSample::new(id, rgb, hmap, annotations)?, record))
}

fn box_blur(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return src.to_vec();
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (ya, yb) = (y.saturating_sub(r), (y + r + 1).min(h));
            let (xa, xb) = (x.saturating_sub(r), (x + r + 1).min(w));
            let mut acc = 0.0;
            for yy in ya..yb {
                acc += src[yy * w + xa..yy * w + xb].iter().sum::<f64>();
            }
            out[y * w + x] = acc / ((yb - ya) * (xb - xa)) as f64;
        }
    }
    out
}
