//! Site configuration: working regions, recognizer thresholds and bucket
//! parameters, read from one TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activity::ActivityParams;
use crate::geometry::{validate_regions, GeometryError, Region};
use crate::productivity::BucketParams;
use crate::safety::SafetyParams;
use crate::stream::{SoftNmsParams, TrackerParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Syntax(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("invalid config: {0}")]
    Geometry(#[from] GeometryError),
}

pub(crate) fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| ConfigError::Syntax(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub regions: Vec<Region>,
    #[serde(default)]
    pub nms: SoftNmsParams,
    #[serde(default)]
    pub tracking: TrackerParams,
    #[serde(default)]
    pub activity: ActivityParams,
    #[serde(default)]
    pub safety: SafetyParams,
    pub productivity: BucketParams,
}

impl SiteConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: SiteConfig = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let config: SiteConfig = read_toml(path.as_ref())?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("site config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_regions(&self.regions)?;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.nms.iou_threshold) && unit(self.nms.score_floor) && self.nms.sigma > 0.0) {
            return Err(ConfigError::Invalid(
                "nms thresholds must lie in [0, 1] and sigma must be positive".into(),
            ));
        }
        if !unit(self.tracking.iou_threshold) {
            return Err(ConfigError::Invalid("tracking.iou_threshold must lie in [0, 1]".into()));
        }
        self.activity.validate().map_err(ConfigError::Invalid)?;
        self.productivity
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}
