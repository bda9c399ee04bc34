use std::path::Path;

use anyhow::{bail, Context, Result};
use rangesplat::expansion::ExpandConfig;
use rangesplat::metrics::EvalConfig;
use rangesplat::optimizer::ReconstructConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairsConfig {
    /// std-dev of the token / conditioning perturbation
    pub sigma: f64,
    /// fraction of Gaussians dropped
    pub tau: f64,
}

impl Default for PairsConfig {
    fn default() -> Self {
        Self { sigma: 0.2, tau: 0.1 }
    }
}

/// Everything a run can be configured with. Keys left out take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub reconstruct: ReconstructConfig,
    pub pairs: PairsConfig,
    pub expand: ExpandConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            reconstruct: ReconstructConfig::default(),
            pairs: PairsConfig::default(),
            expand: ExpandConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.version != CONFIG_VERSION {
            bail!(ConfigVersion(cfg.version));
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[derive(Debug)]
pub struct ConfigVersion(pub u32);

impl std::fmt::Display for ConfigVersion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "unsupported config version {} (expected {CONFIG_VERSION})", self.0)
    }
}

impl std::error::Error for ConfigVersion {}
