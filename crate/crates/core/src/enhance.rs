//! Per-modality input enhancement: power-law gamma curves on the RGB
//! stream and grayscale slicing of the height stream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaConfig {
    /// Scale applied before the power law.
    pub a: f64,
    pub gamma: f64,
}

impl GammaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.gamma > 0.0) {
            return Err(Error::Validation(format!(
                "gamma config needs A > 0 and gamma > 0, got A={} gamma={}",
                self.a, self.gamma
            )));
        }
        Ok(())
    }
}

/// Thresholds of the three-band height slicing. Values in `[c_min, i0]`
/// become `h1`, values in `(i0, i1]` pass through, values in `(i1, c_max]`
/// become `h2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceConfig {
    pub h1: f64,
    pub h2: f64,
    pub i0: f64,
    pub i1: f64,
    #[serde(rename = "cmin")]
    pub c_min: f64,
    #[serde(rename = "cmax")]
    pub c_max: f64,
}

impl Default for SliceConfig {
    /// Vehicle-height band above a ground level of 0 in a 16-bit height map
    /// quantized at 1 cm.
    fn default() -> Self {
        SliceConfig {
            h1: 0.0,
            h2: 0.0,
            i0: 0.5,
            i1: 6.0,
            c_min: 0.0,
            c_max: 655.35,
        }
    }
}

impl SliceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_min <= self.i0 && self.i0 <= self.i1 && self.i1 <= self.c_max) {
            return Err(Error::Validation(format!(
                "slice thresholds must satisfy cmin <= i0 <= i1 <= cmax, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn apply(&self, v: f64) -> f64 {
        if v <= self.i0 {
            self.h1
        } else if v <= self.i1 {
            v
        } else {
            self.h2
        }
    }

    /// True when both replacement heights are fixed points of the slicing,
    /// which makes the slicing idempotent.
    pub fn is_idempotent(&self) -> bool {
        let fixed = |v: f64| v >= self.c_min && v <= self.c_max && self.apply(v) == v;
        fixed(self.h1) && fixed(self.h2)
    }
}

/// `out = clamp((A * v)^gamma, 0, 1)` for inputs in `[0, 1]`.
pub fn gamma_transform(img: &Tensor, cfg: &GammaConfig) -> Result<Tensor> {
    cfg.validate()?;
    if let Some(i) = img.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Validation(format!(
            "gamma_transform input at index {i} is {} (expected [0, 1])",
            img.data()[i]
        )));
    }
    Ok(img.map(|v| (cfg.a * v).powf(cfg.gamma).clamp(0.0, 1.0)))
}

pub fn grayscale_slice(hmap: &Tensor, cfg: &SliceConfig) -> Result<Tensor> {
    cfg.validate()?;
    if let Some(i) = hmap
        .data()
        .iter()
        .position(|v| !(cfg.c_min..=cfg.c_max).contains(v))
    {
        return Err(Error::Validation(format!(
            "height value {} at index {i} outside [{}, {}]",
            hmap.data()[i],
            cfg.c_min,
            cfg.c_max
        )));
    }
    Ok(hmap.map(|v| cfg.apply(v)))
}

/// Enhancement settings for both streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhanceConfig {
    /// One extra RGB-stream channel per coefficient.
    pub gamma_coeffs: Vec<f64>,
    #[serde(rename = "A")]
    pub a: f64,
    pub slice: SliceConfig,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig {
            gamma_coeffs: vec![0.5, 1.5],
            a: 1.0,
            slice: SliceConfig::default(),
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        for &g in &self.gamma_coeffs {
            GammaConfig { a: self.a, gamma: g }.validate()?;
        }
        self.slice.validate()
    }

    pub fn rgb_channels(&self) -> usize {
        3 + self.gamma_coeffs.len()
    }

    /// (3, H, W) image in [0, 1] -> original channels followed by one
    /// gamma-curved luminance channel per coefficient.
    pub fn enhance_rgb(&self, rgb: &Tensor) -> Result<Tensor> {
        let s = rgb.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("enhance_rgb", s, &[3, 0, 0]));
        }
        let plane = s[1] * s[2];
        let d = rgb.data();
        let gray = Tensor::from_fn([1, s[1], s[2]], |i| {
            (0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i]).clamp(0.0, 1.0)
        });
        let mut data = d.to_vec();
        for &g in &self.gamma_coeffs {
            let t = gamma_transform(&gray, &GammaConfig { a: self.a, gamma: g })?;
            data.extend_from_slice(t.data());
        }
        Tensor::new([self.rgb_channels(), s[1], s[2]], data)
    }

    /// (1, H, W) heights -> sliced heights scaled by the pass-band top so
    /// vehicle-range values land in (0, 1].
    pub fn enhance_height(&self, hmap: &Tensor) -> Result<Tensor> {
        let sliced = grayscale_slice(hmap, &self.slice)?;
        let top = if self.slice.i1 > 0.0 { self.slice.i1 } else { 1.0 };
        Ok(sliced.map(|v| v / top))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new([v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn gamma_examples() {
        let id = GammaConfig { a: 1.0, gamma: 1.0 };
        let x = t(&[0.0, 0.3, 0.77, 1.0]);
        assert_eq!(gamma_transform(&x, &id).unwrap(), x);
        let sq = GammaConfig { a: 1.0, gamma: 2.0 };
        assert_eq!(gamma_transform(&t(&[0.5]), &sq).unwrap().data(), &[0.25]);
        for cfg in [sq, GammaConfig { a: 3.0, gamma: 0.4 }] {
            assert_eq!(gamma_transform(&t(&[0.0]), &cfg).unwrap().data(), &[0.0]);
        }
    }

    #[test]
    fn gamma_rejects_out_of_range_with_index() {
        let err = gamma_transform(&t(&[0.2, 1.5]), &GammaConfig { a: 1.0, gamma: 1.0 })
            .unwrap_err()
            .to_string();
        assert!(err.contains("index 1"), "{err}");
        assert!(GammaConfig { a: 0.0, gamma: 1.0 }.validate().is_err());
    }

    #[test]
    fn slice_examples() {
        let cfg = SliceConfig {
            h1: 0.0,
            h2: 0.0,
            i0: 10.0,
            i1: 100.0,
            c_min: 0.0,
            c_max: 255.0,
        };
        assert_eq!(grayscale_slice(&t(&[5.0, 50.0, 150.0]), &cfg).unwrap().data(), &[0.0, 50.0, 0.0]);
        // boundary ownership: i0 -> lower band, i1 -> pass band
        assert_eq!(grayscale_slice(&t(&[10.0, 100.0]), &cfg).unwrap().data(), &[0.0, 100.0]);
        assert!(grayscale_slice(&t(&[300.0]), &cfg).is_err());
        assert!(SliceConfig { i0: 200.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn degenerate_band_is_identity() {
        let cfg = SliceConfig {
            h1: 7.0,
            h2: 9.0,
            i0: 0.0,
            i1: 255.0,
            c_min: 0.0,
            c_max: 255.0,
        };
        let x = t(&[0.5, 17.0, 254.0, 255.0]);
        assert_eq!(grayscale_slice(&x, &cfg).unwrap(), x);
    }

    #[test]
    fn rgb_enhancement_layout() {
        let cfg = EnhanceConfig::default();
        let rgb = Tensor::full([3, 2, 2], 0.25);
        let out = cfg.enhance_rgb(&rgb).unwrap();
        assert_eq!(out.shape(), &[5, 2, 2]);
        assert_eq!(&out.data()[..12], rgb.data());
        assert!((out.at(&[3, 0, 0]) - 0.5).abs() < 1e-12);
        assert!((out.at(&[4, 1, 1]) - 0.125).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn gamma_is_monotone(a in 0.1f64..3.0, g in 0.1f64..4.0, x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
            let cfg = GammaConfig { a, gamma: g };
            let out = gamma_transform(&t(&[x.min(y), x.max(y)]), &cfg).unwrap();
            prop_assert!(out.data()[0] <= out.data()[1]);
        }

        #[test]
        fn slice_output_bands(vals in prop::collection::vec(0.0f64..=255.0, 1..64), i0 in 0.0f64..128.0, span in 0.0f64..127.0) {
            let cfg = SliceConfig { h1: 0.0, h2: 255.0, i0, i1: i0 + span, c_min: 0.0, c_max: 255.0 };
            let x = t(&vals);
            let out = grayscale_slice(&x, &cfg).unwrap();
            let in_band = |v: f64| v > cfg.i0 && v <= cfg.i1;
            prop_assert_eq!(
                x.data().iter().filter(|&&v| in_band(v)).count(),
                out.data().iter().filter(|&&v| in_band(v)).count()
            );
            for &v in out.data() {
                prop_assert!(v == cfg.h1 || v == cfg.h2 || in_band(v));
            }
            prop_assert!(cfg.is_idempotent());
            prop_assert_eq!(grayscale_slice(&out, &cfg).unwrap(), out);
        }
    }
}
