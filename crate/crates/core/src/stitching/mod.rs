//! Compositing partial sub-scene renders into a query image.
//!
//! All partial renders are produced at the query camera, so they are
//! already aligned pixel-for-pixel. Stitching drops blurred tiles, equalizes
//! brightness over the remaining overlaps and blends.

pub mod blend;
pub mod blur;
pub mod gain;
pub mod metrics;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use blend::{feather_blend, multiband_blend, BlendOutput};
pub use blur::{detect_blur, BlurConfig, BlurMask};
pub use gain::{gain_compensate, GainResult};
pub use metrics::{compute_psnr, compute_ssim};

use crate::raster::{FloatImage, RasterError, RasterImage};
use crate::registration::{PlanMode, RenderPlan};

#[derive(Debug, Error)]
pub enum StitchError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("plan for {query} lists sub-scene {subscene_id} but no render was supplied")]
    IncompletePlan { query: String, subscene_id: u32 },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// A partial render with its per-pixel trust weights in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeInput {
    pub image: FloatImage,
    pub keep_mask: Vec<f32>,
    pub source_subscene_id: u32,
}

impl CompositeInput {
    pub fn new(image: FloatImage, keep_mask: Vec<f32>, source_subscene_id: u32) -> Result<Self, StitchError> {
        if keep_mask.len() != image.pixel_count() {
            return Err(StitchError::Validation(format!(
                "mask has {} entries for a {}x{} image",
                keep_mask.len(),
                image.width,
                image.height
            )));
        }
        Ok(Self {
            image,
            keep_mask,
            source_subscene_id,
        })
    }

    pub fn trusted_fraction(&self) -> f64 {
        self.keep_mask.iter().filter(|&&k| k > 0.0).count() as f64 / self.keep_mask.len().max(1) as f64
    }
}

pub(crate) fn check_dimensions(inputs: &[CompositeInput]) -> Result<(), StitchError> {
    if let Some(first) = inputs.first() {
        for other in &inputs[1..] {
            if (other.image.width, other.image.height) != (first.image.width, first.image.height) {
                return Err(StitchError::Validation(format!(
                    "dimension mismatch: {}x{} vs {}x{}",
                    first.image.width, first.image.height, other.image.width, other.image.height
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    Feather,
    Multiband,
}

impl std::str::FromStr for BlendMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "feather" => Ok(BlendMode::Feather),
            "multiband" => Ok(BlendMode::Multiband),
            other => Err(format!("unknown blend mode `{other}` (feather|multiband)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StitchConfig {
    pub blur: BlurConfig,
    pub blend: BlendMode,
    pub bands: usize,
}

impl Default for StitchConfig {
    fn default() -> Self {
        Self {
            blur: BlurConfig::default(),
            blend: BlendMode::Multiband,
            bands: blend::DEFAULT_BANDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchInputReport {
    pub subscene_id: u32,
    pub trusted_fraction: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchReport {
    pub inputs: Vec<StitchInputReport>,
    pub hole_pixels: usize,
    pub blend_mode: BlendMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr_vs_reference: Option<f64>,
}

/// Composites the renders a plan asks for.
///
/// A stitch-free plan returns its single render untouched.
pub fn stitch(
    plan: &RenderPlan,
    renders: &HashMap<u32, RasterImage>,
    config: &StitchConfig,
) -> Result<(RasterImage, StitchReport), StitchError> {
    let mut ordered = Vec::with_capacity(plan.subscene_ids.len());
    for &id in &plan.subscene_ids {
        let render = renders.get(&id).ok_or_else(|| StitchError::IncompletePlan {
            query: plan.query_image_id.clone(),
            subscene_id: id,
        })?;
        ordered.push((id, render));
    }
    let Some(&(first_id, first)) = ordered.first() else {
        return Err(StitchError::Validation("plan lists no sub-scenes".into()));
    };
    for (_, r) in &ordered {
        first.same_size(r)?;
    }

    if plan.mode == PlanMode::StitchFree {
        let report = StitchReport {
            inputs: vec![StitchInputReport {
                subscene_id: first_id,
                trusted_fraction: 1.0,
                gain: 1.0,
            }],
            hole_pixels: 0,
            blend_mode: config.blend,
            psnr_vs_reference: None,
        };
        return Ok((first.clone(), report));
    }

    let mut inputs = Vec::with_capacity(ordered.len());
    for (id, render) in &ordered {
        let mask = detect_blur(render, config.blur.tile, config.blur.threshold)?;
        inputs.push(CompositeInput::new(render.to_float(), mask.keep_mask(), *id)?);
    }
    let gains = gain_compensate(&inputs)?;
    let compensated: Vec<CompositeInput> = inputs
        .iter()
        .zip(&gains.gains)
        .map(|(input, &g)| CompositeInput {
            image: input.image.scaled(g as f32),
            ..input.clone()
        })
        .collect();
    let blended = match config.blend {
        BlendMode::Feather => feather_blend(&compensated)?,
        BlendMode::Multiband => multiband_blend(&compensated, config.bands)?,
    };
    let report = StitchReport {
        inputs: inputs
            .iter()
            .zip(&gains.gains)
            .map(|(input, &gain)| StitchInputReport {
                subscene_id: input.source_subscene_id,
                trusted_fraction: input.trusted_fraction(),
                gain,
            })
            .collect(),
        hole_pixels: blended.hole_pixels,
        blend_mode: config.blend,
        psnr_vs_reference: None,
    };
    Ok((blended.image.quantize(), report))
}
