//! Text annotation files: `class_id xc yc w h theta_deg [score]` per line,
//! `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{DetectionRecord, ObbAnnotation};

fn parse_lines(text: &str, path: &Path, with_score: bool) -> Result<Vec<(ObbAnnotation, f64)>> {
    let want = if with_score { 7 } else { 6 };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != want {
            return Err(perr(format!("expected {want} fields, found {}", fields.len())));
        }
        let class_id: u32 = fields[0]
            .parse()
            .map_err(|_| perr(format!("bad class id {:?}", fields[0])))?;
        let mut nums = [0.0; 6];
        for (k, f) in fields[1..].iter().enumerate() {
            nums[k] = f.parse().map_err(|_| perr(format!("bad number {f:?}")))?;
        }
        let [xc, yc, w, h, theta, score] = nums;
        let obb = ObbAnnotation::new(class_id, xc, yc, w, h, theta).map_err(|e| perr(e.to_string()))?;
        out.push((obb, score));
    }
    Ok(out)
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<ObbAnnotation>> {
    Ok(parse_lines(text, path, false)?.into_iter().map(|(o, _)| o).collect())
}

/// Annotation lines with a trailing score column.
pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<DetectionRecord>> {
    parse_lines(text, path, true)?
        .into_iter()
        .enumerate()
        .map(|(i, (obb, score))| {
            DetectionRecord::new(obb, score).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn push_obb(s: &mut String, o: &ObbAnnotation) {
    write!(s, "{} {} {} {} {} {}", o.class_id, o.xc, o.yc, o.w, o.h, o.theta).unwrap();
}

/// Shortest round-trip float formatting, so parsing reproduces every value.
pub fn format_annotations(anns: &[ObbAnnotation]) -> String {
    let mut s = String::new();
    for a in anns {
        push_obb(&mut s, a);
        s.push('\n');
    }
    s
}

pub fn format_detections(dets: &[DetectionRecord]) -> String {
    let mut s = String::new();
    for d in dets {
        push_obb(&mut s, &d.obb);
        writeln!(s, " {}", d.score).unwrap();
    }
    s
}
