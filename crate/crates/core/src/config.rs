//! One TOML file holding every module's settings, with `section.key=value`
//! overrides on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SynthConfig, TileSpec};
use crate::detector::{DetectorConfig, FusionConfig};
use crate::enhance::EnhanceConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub enhance: EnhanceConfig,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub detector: DetectorConfig,
    pub tile: TileSpec,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `section.key=value` assignments. Values are parsed as TOML
    /// and fall back to a plain string.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, sets: &[S]) -> Result<()> {
        if sets.is_empty() {
            return Ok(());
        }
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        for set in sets {
            let set = set.as_ref();
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {set:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("{key}: {part} is not inside a section")))?;
                if i + 1 == parts.len() {
                    if !table.contains_key(*part) {
                        return Err(Error::Config(format!("unknown key {key}")));
                    }
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table
                    .get_mut(*part)
                    .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
            }
        }
        *self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.enhance.validate()?;
        self.fusion.validate()?;
        self.loss.validate()?;
        self.detector.validate()?;
        self.tile.validate()?;
        self.synth.validate()?;
        if self.loss.theta != self.fusion.theta {
            return Err(Error::Config(format!(
                "loss.theta {} differs from fusion.theta {}",
                self.loss.theta, self.fusion.theta
            )));
        }
        Ok(())
    }

    /// Fully resolved config as TOML, as logged by every command.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Variant;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[detector]\nmax_epoch = 3\n").is_err());
        assert!(RunConfig::from_toml_str("[nope]\n").is_err());
        let mut c = RunConfig::default();
        assert!(c.apply_overrides(&["detector.nope=1"]).is_err());
        assert!(c.apply_overrides(&["detector"]).is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut c = RunConfig::from_toml_str("[detector]\nmax_epochs = 3\nvariant = \"h_only\"\n").unwrap();
        assert_eq!(c.detector.max_epochs, 3);
        c.apply_overrides(&[
            "detector.max_epochs=5",
            "detector.variant=rgb_only",
            "synth.occluder_prob=0.25",
            "detector.lr_initial=1e-3",
        ])
        .unwrap();
        assert_eq!(c.detector.max_epochs, 5);
        assert_eq!(c.detector.variant, Variant::RgbOnly);
        assert_eq!(c.synth.occluder_prob, 0.25);
        assert_eq!(c.detector.lr_initial, 1e-3);
        assert!(c.apply_overrides(&["detector.max_epochs=many"]).is_err());
    }

    #[test]
    fn theta_must_agree() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["loss.theta=0.3"]).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.apply_overrides(&["fusion.theta=0.3"]).unwrap();
        c.validate().unwrap();
    }
}
