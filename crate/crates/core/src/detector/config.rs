use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which input streams a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Multimodal,
    RgbOnly,
    HOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::RgbOnly, Variant::HOnly, Variant::Multimodal];

    pub fn uses_rgb(self) -> bool {
        self != Variant::HOnly
    }

    pub fn uses_height(self) -> bool {
        self != Variant::RgbOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Multimodal => "multimodal",
            Variant::RgbOnly => "rgb_only",
            Variant::HOnly => "h_only",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multimodal" => Ok(Variant::Multimodal),
            "rgb_only" => Ok(Variant::RgbOnly),
            "h_only" => Ok(Variant::HOnly),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Confidence threshold for the hard/easy masks.
    pub theta: f64,
    /// Query/key width of the attention projections.
    pub attn_channels: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            theta: 0.2,
            attn_channels: 8,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("fusion.theta = {} outside (0, 1)", self.theta)));
        }
        if self.attn_channels == 0 {
            return Err(Error::Config("fusion.attn_channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// `[channels, stride]` per 3x3 block of the RGB stream.
    pub rgb_blocks: Vec<[usize; 2]>,
    pub h_blocks: Vec<[usize; 2]>,
    /// Detection strides; a single scale is supported.
    pub scales: Vec<usize>,
    pub num_classes: usize,
    pub leaky_slope: f64,
    pub variant: Variant,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescales the gradient to this global L2 norm when it is larger; 0 disables.
    pub grad_clip: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Random horizontal/vertical flips during training.
    pub augment: bool,
    /// Validation AP every this many epochs (and always after the last);
    /// 0 evaluates only after the last epoch.
    pub val_every: usize,
    pub conf_threshold: f64,
    pub nms_threshold: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            rgb_blocks: vec![[8, 1], [16, 2], [16, 1], [24, 2], [24, 1], [32, 1]],
            h_blocks: vec![[4, 1], [8, 2], [16, 2], [32, 1]],
            scales: vec![4],
            num_classes: 1,
            leaky_slope: 0.1,
            variant: Variant::Multimodal,
            lr_initial: 1.5e-4,
            lr_final: 1e-6,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 0.0,
            max_epochs: 30,
            batch_size: 8,
            augment: true,
            val_every: 1,
            conf_threshold: 0.2,
            nms_threshold: 0.45,
            seed: 0,
        }
    }
}

fn total_stride(blocks: &[[usize; 2]]) -> usize {
    blocks.iter().map(|b| b[1]).product()
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scales.len() != 1 {
            return bad(format!("detector.scales must hold exactly one stride, got {:?}", self.scales));
        }
        let stride = self.scales[0];
        for (name, blocks, used) in [
            ("rgb_blocks", &self.rgb_blocks, self.variant.uses_rgb()),
            ("h_blocks", &self.h_blocks, self.variant.uses_height()),
        ] {
            if !used {
                continue;
            }
            if blocks.is_empty() || blocks.iter().any(|b| b[0] == 0 || !(b[1] == 1 || b[1] == 2)) {
                return bad(format!("detector.{name}: need >= 1 block, channels > 0, stride 1 or 2"));
            }
            if total_stride(blocks) != stride {
                return bad(format!(
                    "detector.{name} downsamples by {} but the detection stride is {stride}",
                    total_stride(blocks)
                ));
            }
        }
        if self.variant == Variant::Multimodal && self.rgb_blocks.last() .map(|b| b[0]) != self.h_blocks.last().map(|b| b[0]) {
            return bad("detector: both streams must end with the same channel count to be fused".into());
        }
        if self.num_classes == 0 {
            return bad("detector.num_classes must be positive".into());
        }
        if !(self.lr_final >= 0.0 && self.lr_final <= self.lr_initial && self.lr_initial.is_finite()) {
            return bad(format!(
                "detector: need 0 <= lr_final ({}) <= lr_initial ({})",
                self.lr_final, self.lr_initial
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("detector: momentum must be in [0, 1), weight_decay and grad_clip >= 0".into());
        }
        for (n, v) in [("conf_threshold", self.conf_threshold), ("nms_threshold", self.nms_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("detector.{n} = {v} outside (0, 1)"));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("detector: batch_size and max_epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad("detector.leaky_slope must be in [0, 1)".into());
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.scales[0]
    }

    /// Cosine decay from `lr_initial` at epoch 0 to `lr_final` at the last epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.max_epochs <= 1 {
            return self.lr_initial;
        }
        let t = epoch.min(self.max_epochs - 1) as f64 / (self.max_epochs - 1) as f64;
        self.lr_final + 0.5 * (self.lr_initial - self.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        DetectorConfig::default().validate().unwrap();
        FusionConfig::default().validate().unwrap();
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let c = DetectorConfig::default();
        assert_eq!(c.learning_rate(0), 1.5e-4);
        assert!((c.learning_rate(29) - 1e-6).abs() < 1e-18);
        for e in 1..30 {
            assert!(c.learning_rate(e) < c.learning_rate(e - 1));
        }
    }

    #[test]
    fn rejects_inconsistent_architectures() {
        let mut c = DetectorConfig::default();
        c.h_blocks = vec![[4, 2], [16, 1]];
        assert!(c.validate().is_err());
        c.variant = Variant::RgbOnly;
        assert!(c.validate().is_ok());
        let mut c = DetectorConfig::default();
        c.h_blocks.last_mut().unwrap()[0] = 16;
        assert!(c.validate().is_err());
        let c = DetectorConfig { lr_final: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = DetectorConfig { conf_threshold: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("both".parse::<Variant>().is_err());
    }
}
