//! Pipeline-wide configuration and its content hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decomposition::{DecompositionConfig, DEFAULT_MAX_N, DEFAULT_SIGMA, DEFAULT_TARGET_PER_SCENE};
use crate::ground::DEFAULT_TRIM_FRACTION;
use crate::orchestration::synthetic::DEFAULT_BLUR_RADIUS;
use crate::orchestration::{EngineKind, DEFAULT_ITERATIONS, DEFAULT_PARALLELISM};
use crate::stitching::blend::DEFAULT_BANDS;
use crate::stitching::{BlendMode, BlurConfig, StitchConfig};

pub const DEFAULT_ENGINE_COMMAND: &str =
    "python3 scripts/run.py --scene {dataset_dir} --n_steps {iterations} --save_snapshot {artifact_path}";

#[derive(Debug, Error, PartialEq)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub target_per_scene: usize,
    #[serde(rename = "maxN", alias = "max_n")]
    pub max_n: usize,
    pub sigma: f64,
    pub seed: u64,
    pub iterations: u32,
    pub engine: EngineKind,
    pub engine_cmd: String,
    /// Render command for the external engine; see [`crate::orchestration::ExternalRenderer`].
    pub render_cmd: Option<String>,
    /// Blur σ, in pixels, that synthetic models apply outside their footprint.
    pub synthetic_blur_radius: f64,
    pub trim_fraction: f64,
    pub blur: BlurConfig,
    pub blend: BlendMode,
    pub bands: usize,
    /// Not part of the hash: it cannot change any output.
    pub parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            target_per_scene: DEFAULT_TARGET_PER_SCENE,
            max_n: DEFAULT_MAX_N,
            sigma: DEFAULT_SIGMA,
            seed: 0,
            iterations: DEFAULT_ITERATIONS,
            engine: EngineKind::External,
            engine_cmd: DEFAULT_ENGINE_COMMAND.to_string(),
            render_cmd: None,
            synthetic_blur_radius: DEFAULT_BLUR_RADIUS,
            trim_fraction: DEFAULT_TRIM_FRACTION,
            blur: BlurConfig::default(),
            blend: BlendMode::Multiband,
            bands: DEFAULT_BANDS,
            parallelism: DEFAULT_PARALLELISM,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.decomposition().validate().map_err(|e| ConfigError(e.to_string()))?;
        let checks: [(bool, String); 7] = [
            (self.iterations >= 1, "iterations must be >= 1".into()),
            (self.parallelism >= 1, "parallelism must be >= 1".into()),
            (
                (0.0..0.5).contains(&self.trim_fraction),
                format!("trim_fraction must be in [0, 0.5), got {}", self.trim_fraction),
            ),
            (self.blur.tile >= 3, format!("blur tile must be >= 3 px, got {}", self.blur.tile)),
            (
                self.blur.threshold.is_finite() && self.blur.threshold >= 0.0,
                format!("blur threshold must be finite and >= 0, got {}", self.blur.threshold),
            ),
            (self.bands >= 1, "bands must be >= 1".into()),
            (
                self.synthetic_blur_radius.is_finite() && self.synthetic_blur_radius >= 0.0,
                format!("synthetic blur radius must be >= 0, got {}", self.synthetic_blur_radius),
            ),
        ];
        match checks.into_iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(ConfigError(msg)),
            None => Ok(()),
        }
    }

    pub fn decomposition(&self) -> DecompositionConfig {
        DecompositionConfig {
            seed: self.seed,
            sigma: self.sigma,
            target_per_scene: self.target_per_scene,
            max_n: self.max_n,
        }
    }

    pub fn stitch(&self) -> StitchConfig {
        StitchConfig {
            blur: self.blur,
            blend: self.blend,
            bands: self.bands,
        }
    }

    /// Hex SHA-256 of the canonical JSON form with `parallelism` zeroed.
    pub fn config_hash(&self) -> String {
        let canonical = Self {
            parallelism: 0,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
