//! Run configuration: one TOML file with `[generator]`, `[model]`,
//! `[training]`, and `[evaluation]` sections. Unknown keys are rejected so
//! typos fail loudly instead of silently using a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::benchmark::GeneratorConfig;
use crate::ensemble::EnsembleConfig;
use crate::models::Dims;
use crate::{Error, Result};

/// Model-side knobs not implied by the generator's shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_hidden() -> usize {
    32
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: default_hidden() }
    }
}

/// Attention-grounding evaluation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_cap")]
    pub cap: usize,
}

fn default_threshold() -> f64 {
    0.2
}

fn default_cap() -> usize {
    4
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { threshold: default_threshold(), cap: default_cap() }
    }
}

/// Everything one run needs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: EnsembleConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.training.validate()?;
        if self.model.hidden == 0 {
            return Err(Error::Config("model.hidden must be >= 1".into()));
        }
        if !(self.evaluation.threshold > 0.0 && self.evaluation.threshold < 1.0) {
            return Err(Error::Config("evaluation.threshold must lie in (0, 1)".into()));
        }
        if self.evaluation.cap == 0 {
            return Err(Error::Config("evaluation.cap must be >= 1".into()));
        }
        Ok(())
    }

    /// Architecture shapes implied by the generator plus the model section.
    pub fn dims(&self) -> Dims {
        Dims {
            n_v: self.generator.regions,
            d_v: self.generator.d_v,
            d_q: self.generator.d_q,
            hidden: self.model.hidden,
            classes: self.generator.classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::Variant;
    use crate::losses::LossFamily;

    #[test]
    fn defaults_parse_from_empty_document() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.model.hidden, 32);
        assert_eq!(cfg.evaluation.threshold, 0.2);
        assert_eq!(cfg.evaluation.cap, 4);
        assert_eq!(cfg.training.batch_size, 64);
        assert_eq!(cfg.generator.classes, 20);
    }

    #[test]
    fn sections_override_defaults() {
        let text = r#"
[generator]
classes = 8
types = 2
n_train = 100
n_test = 40

[model]
hidden = 16

[training]
variant = "gge-dq"
schedule = "iter"
loss_family = "sxce"
epochs = 3
seed = 9

[evaluation]
threshold = 0.3
cap = 3
"#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.generator.classes, 8);
        assert_eq!(cfg.training.variant, Variant::GgeDq);
        assert_eq!(cfg.training.loss_family, LossFamily::Sxce);
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.evaluation.cap, 3);
        assert_eq!(cfg.dims().hidden, 16);
        assert_eq!(cfg.dims().classes, 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[training]\nvariant = \"baseline\"\nlearning_rate = 0.1\n").is_err());
        assert!(RunConfig::from_toml("[extra]\nx = 1\n").is_err());
        assert!(RunConfig::from_toml("[generator]\nclases = 4\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[evaluation]\nthreshold = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[evaluation]\ncap = 0\n").is_err());
        assert!(RunConfig::from_toml("[model]\nhidden = 0\n").is_err());
        assert!(RunConfig::from_toml("[generator]\nhead_mass = 1.5\n").is_err());
    }

    #[test]
    fn toml_roundtrip_preserves_config() {
        let cfg = RunConfig::from_toml("[training]\nvariant = \"rubi\"\nepochs = 2\n").unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }
}
