//! Run manifests: everything needed to reproduce a run, plus output hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rephoto_core::losses::LossWeights;
use rephoto_core::projector::{NoiseRamp, ProjectorConfig, StageConfig};
use serde::{Deserialize, Serialize};

use crate::assets::{AssetRecord, AssetSource};

pub const RUN_MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSettings {
    pub cutoff_resolution: usize,
    pub iterations: usize,
    pub style_lr: f64,
    pub crf_lr: f64,
    pub noise_initial: f64,
    pub noise_ramp_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSettings {
    pub vgg: f64,
    pub face: f64,
    pub eye: f64,
    pub ctx: f64,
    pub color: f64,
}

/// Serializable mirror of [`ProjectorConfig`] minus the fields recorded
/// elsewhere in the manifest (film, sigma, eyes, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorSettings {
    pub stages: Vec<StageSettings>,
    pub weights: WeightSettings,
    pub perceptual_size: usize,
    pub context_size: usize,
    pub stall_window: usize,
}

impl From<&ProjectorConfig> for ProjectorSettings {
    fn from(c: &ProjectorConfig) -> Self {
        let w = c.weights;
        Self {
            stages: c
                .stages
                .iter()
                .map(|s| StageSettings {
                    cutoff_resolution: s.cutoff_resolution,
                    iterations: s.iterations,
                    style_lr: s.style_lr,
                    crf_lr: s.crf_lr,
                    noise_initial: s.noise.initial,
                    noise_ramp_fraction: s.noise.ramp_fraction,
                })
                .collect(),
            weights: WeightSettings {
                vgg: w.vgg,
                face: w.face,
                eye: w.eye,
                ctx: w.ctx,
                color: w.color,
            },
            perceptual_size: c.perceptual_size,
            context_size: c.context_size,
            stall_window: c.stall_window,
        }
    }
}

impl ProjectorSettings {
    /// Writes these settings into `cfg`.
    pub fn apply(&self, cfg: &mut ProjectorConfig) {
        cfg.stages = self
            .stages
            .iter()
            .map(|s| StageConfig {
                cutoff_resolution: s.cutoff_resolution,
                iterations: s.iterations,
                style_lr: s.style_lr,
                crf_lr: s.crf_lr,
                noise: NoiseRamp {
                    initial: s.noise_initial,
                    ramp_fraction: s.noise_ramp_fraction,
                },
            })
            .collect();
        let w = &self.weights;
        cfg.weights = LossWeights {
            vgg: w.vgg,
            face: w.face,
            eye: w.eye,
            ctx: w.ctx,
            color: w.color,
        };
        cfg.perceptual_size = self.perceptual_size;
        cfg.context_size = self.context_size;
        cfg.stall_window = self.stall_window;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub input: PathBuf,
    pub input_sha256: String,
    pub film: String,
    pub sigma: f64,
    pub eyes: String,
    pub seed: u64,
    pub asset_source: AssetSource,
    pub assets: Vec<AssetRecord>,
    pub projector: ProjectorSettings,
    /// Output file name to hex SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
    }
}
