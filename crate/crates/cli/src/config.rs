use std::path::Path;

use scrforge_core::pnp::RansacConfig;
use scrforge_core::registration::IcpConfig;
use scrforge_core::renderer::{PoseSamplerConfig, SplatConfig};
use scrforge_core::toy::ToyConfig;
use scrforge_core::CameraIntrinsics;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistMatchOptions {
    /// Use each image's own CDF as the source instead of the pooled one.
    pub per_image: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    pub intrinsics: CameraIntrinsics,
    pub splat: SplatConfig,
    pub sampler: PoseSamplerConfig,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 180.0, width: 640, height: 360 },
            splat: SplatConfig::default(),
            sampler: PoseSamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    /// Sampling stride on full-resolution maps, and the cell size of
    /// prediction grids.
    pub stride: u32,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { stride: 8 }
    }
}

/// Settings for every subcommand, loaded from TOML. Missing keys take
/// their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub render: RenderOptions,
    pub histmatch: HistMatchOptions,
    pub solve: SolveOptions,
    pub ransac: RansacConfig,
    pub icp: IcpConfig,
    pub toy: ToyConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.render.intrinsics.validate().map_err(|e| CliError::Config(e.to_string()))?;
        cfg.toy.intrinsics.validate().map_err(|e| CliError::Config(e.to_string()))?;
        cfg.ransac.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.solve.stride == 0 {
            return Err(CliError::Config("solve.stride must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_toml(&text)
            }
        }
    }
}
