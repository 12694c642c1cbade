//! Run configuration file: global settings plus one optional table per
//! subcommand. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use depthprop::pyramid::CompletionConfigFile;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub complete: CompletionConfigFile,
    #[serde(default)]
    pub fuse: FuseSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub rf: RfSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub layout: Option<String>,
    pub gt_density: Option<f64>,
    pub outliers: Option<f64>,
    pub outlier_magnitude: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub mode: Option<String>,
    pub max_samples: Option<usize>,
    pub response_threshold: Option<f64>,
    pub nms_radius: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseSection {
    pub threshold: Option<f64>,
    pub min_views: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub bin_width: Option<f64>,
    pub cloud_threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfSection {
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub n_scales: Option<usize>,
    pub iters_per_scale: Option<usize>,
    pub base_dilation: Option<u32>,
    pub dilation_increment: Option<i32>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag, then file, then built-in default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
