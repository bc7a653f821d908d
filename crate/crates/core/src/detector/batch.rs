use crate::data::SceneSample;
use crate::enhance::EnhanceConfig;
use crate::error::{Error, Result};
use crate::geom::{normalize_angle, ObbAnnotation};
use crate::tensor::Tensor;

use super::config::Variant;

/// A scene after enhancement, holding only the streams a variant reads.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    /// (C_rgb, H, W)
    pub rgb: Option<Tensor>,
    /// (1, H, W)
    pub height: Option<Tensor>,
    pub annotations: Vec<ObbAnnotation>,
    pub width: usize,
    pub height_px: usize,
}

pub fn prepare_sample(s: &SceneSample, enh: &EnhanceConfig, variant: Variant) -> Result<PreparedSample> {
    let rgb = variant.uses_rgb().then(|| enh.enhance_rgb(&s.rgb_tensor())).transpose()?;
    let height = variant.uses_height().then(|| enh.enhance_height(&s.height_tensor())).transpose()?;
    Ok(PreparedSample {
        id: s.id.clone(),
        rgb,
        height,
        annotations: s.annotations.clone(),
        width: s.width(),
        height_px: s.height(),
    })
}

pub fn prepare_samples(samples: &[SceneSample], enh: &EnhanceConfig, variant: Variant) -> Result<Vec<PreparedSample>> {
    enh.validate()?;
    samples.iter().map(|s| prepare_sample(s, enh, variant)).collect()
}

/// Stacked network inputs and per-image labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rgb: Option<Tensor>,
    pub height: Option<Tensor>,
    pub annotations: Vec<Vec<ObbAnnotation>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn grid(&self, stride: usize) -> Result<(usize, usize)> {
        let t = self
            .rgb
            .as_ref()
            .or(self.height.as_ref())
            .ok_or_else(|| Error::Validation("batch has no input".into()))?;
        Ok((t.shape()[2] / stride, t.shape()[3] / stride))
    }
}

/// Mirrors a (C, H, W) tensor left-right and/or top-bottom.
pub fn flip_tensor(t: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    if !horizontal && !vertical {
        return t.clone();
    }
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Tensor::from_fn(s.to_vec(), |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let sy = if vertical { h - 1 - y } else { y };
        let sx = if horizontal { w - 1 - x } else { x };
        d[(c * h + sy) * w + sx]
    })
}

pub fn flip_annotation(a: &ObbAnnotation, width: usize, height: usize, horizontal: bool, vertical: bool) -> ObbAnnotation {
    let mut o = *a;
    if horizontal {
        o.xc = width as f64 - o.xc;
        o.theta = normalize_angle(-o.theta);
    }
    if vertical {
        o.yc = height as f64 - o.yc;
        o.theta = normalize_angle(-o.theta);
    }
    o.canonical()
}

/// Stacks samples (all the same size) applying per-sample `(h, v)` flips.
pub fn make_batch(samples: &[&PreparedSample], flips: &[(bool, bool)]) -> Result<Batch> {
    assert_eq!(samples.len(), flips.len());
    let stack = |pick: fn(&PreparedSample) -> Option<&Tensor>| -> Result<Option<Tensor>> {
        let parts: Option<Vec<Tensor>> = samples
            .iter()
            .zip(flips)
            .map(|(s, &(fh, fv))| pick(s).map(|t| flip_tensor(t, fh, fv)))
            .collect();
        parts.map(|p| Tensor::stack(&p)).transpose()
    };
    let annotations = samples
        .iter()
        .zip(flips)
        .map(|(s, &(fh, fv))| {
            s.annotations
                .iter()
                .map(|a| flip_annotation(a, s.width, s.height_px, fh, fv))
                .collect()
        })
        .collect();
    Ok(Batch {
        rgb: stack(|s| s.rgb.as_ref())?,
        height: stack(|s| s.height.as_ref())?,
        annotations,
    })
}
