//! Run configuration: one TOML tree with a section per module, plus dotted
//! `section.key=value` overrides.
//!
//! ```toml
//! [sigma]
//! k = 3
//! [network]
//! stage_channel_widths = [16, 32, 32]
//! [training]
//! iterations = 400
//! ```
//!
//! Missing sections and keys take their module defaults; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agronomy::EarCountConfig;
use crate::augment::AugmentConfig;
use crate::densitymap::SigmaPolicy;
use crate::error::{Error, Result};
use crate::model::NetworkConfig;
use crate::ssl::SslConfig;
use crate::synthgen::SynthSpec;
use crate::train::TrainingConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sigma: SigmaPolicy,
    pub synth: SynthSpec,
    pub augment: AugmentConfig,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub ssl: SslConfig,
    pub ear: EarCountConfig,
}

impl RunConfig {
    /// Small configuration that trains on one CPU core in minutes: 64 px
    /// patches from five scales, the desk network, and a short schedule.
    pub fn desk() -> Self {
        Self {
            augment: AugmentConfig {
                scale_min: 0.8,
                scale_max: 1.2,
                patches_per_scale_image: 4,
                patch_size: 64,
                ..AugmentConfig::default()
            },
            network: NetworkConfig::desk(),
            training: TrainingConfig {
                iterations: 800,
                lr_initial: 3e-3,
                lr_final: 3e-4,
                val_every: 100,
                checkpoint_every: 0,
                ..TrainingConfig::default()
            },
            ssl: SslConfig {
                student_iterations: 800,
                ..SslConfig::default()
            },
            ..Self::default()
        }
    }

    /// Parse `text`, apply `overrides` in order, then validate every section.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("config parse error: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from `path`, or start from defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.sigma.validate()?;
        self.synth.validate()?;
        self.augment.validate()?;
        self.network.validate()?;
        self.training.validate()?;
        self.ssl.validate()?;
        self.ear.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not of the form key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override `{spec}` has an empty key")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut node = tree;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{spec}`: `{k}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// TOML literal when it parses as one, bare string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Decay;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml_with_overrides(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn desk_preset_validates() {
        let c = RunConfig::desk();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml_with_overrides(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_toml_with_overrides(
            "[training]\niterations = 10\n",
            &[
                "training.batch_size=4".into(),
                "training.decay=linear".into(),
                "network.stage_channel_widths=[8, 16]".into(),
                "network.stage_depths=[1, 1]".into(),
                "network.fusion_taps=[0, 1]".into(),
                "network.downsample_factor=2".into(),
                "ear.side_multiplier=2.0".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.training.iterations, 10);
        assert_eq!(c.training.batch_size, 4);
        assert_eq!(c.training.decay, Decay::Linear);
        assert_eq!(c.network.stage_channel_widths, vec![8, 16]);
        assert_eq!(c.ear.side_multiplier, 2.0);
    }

    #[test]
    fn unknown_keys_and_invalid_values_are_config_errors() {
        let e = RunConfig::from_toml_with_overrides("[training]\nbogus = 1\n", &[]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = RunConfig::from_toml_with_overrides("", &["ssl.pseudo_per_batch=5".into()]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(RunConfig::from_toml_with_overrides("", &["noequals".into()]).is_err());
        assert!(RunConfig::from_toml_with_overrides("[sigma\n", &[]).is_err());
    }
}
