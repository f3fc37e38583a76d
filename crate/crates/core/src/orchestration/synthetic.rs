//! Deterministic textured-plane engine standing in for a trained radiance field.
//!
//! A synthetic model renders the ground texture sharply inside the footprint
//! it was "trained" on and a Gaussian-blurred version of the same view
//! outside it, which mimics the degraded extrapolation of a real model away
//! from its training cameras.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{EngineError, RenderEngine, RenderRequest, SubSceneModel, Trainer};
use crate::ground::{ray_plane_intersect, FootprintRect, GroundPlane};
use crate::raster::{gaussian_blur, FloatImage, RasterImage};

pub const DEFAULT_BLUR_RADIUS: f64 = 8.0;
pub const MISS_GRAY: f32 = 128.0;

/// Bilinear texture lookup for plane coordinates: the texture spans
/// `window`, with its top row at `window.max_v` and clamp-to-edge outside.
pub fn sample_texture(texture: &RasterImage, window: &FootprintRect, u: f64, v: f64) -> [f32; 3] {
    let (w, h) = (texture.width as f64, texture.height as f64);
    let tx = (u - window.min_u) / window.width() * w - 0.5;
    let ty = (window.max_v - v) / window.height() * h - 0.5;
    let x0 = tx.floor();
    let y0 = ty.floor();
    let fx = tx - x0;
    let fy = ty - y0;
    let clamp_x = |x: f64| x.clamp(0.0, w - 1.0) as u32;
    let clamp_y = |y: f64| y.clamp(0.0, h - 1.0) as u32;
    let (xa, xb) = (clamp_x(x0), clamp_x(x0 + 1.0));
    let (ya, yb) = (clamp_y(y0), clamp_y(y0 + 1.0));
    let p00 = texture.pixel(xa, ya);
    let p10 = texture.pixel(xb, ya);
    let p01 = texture.pixel(xa, yb);
    let p11 = texture.pixel(xb, yb);
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let top = f64::from(p00[c]) * (1.0 - fx) + f64::from(p10[c]) * fx;
        let bottom = f64::from(p01[c]) * (1.0 - fx) + f64::from(p11[c]) * fx;
        out[c] = (top * (1.0 - fy) + bottom * fy) as f32;
    }
    out
}

/// Per-pixel ground hits of a request: plane coordinates, or `None` when
/// the pixel's ray misses the plane.
pub fn pixel_ground_hits(req: &RenderRequest, plane: &GroundPlane) -> Vec<Option<[f64; 2]>> {
    let intr = &req.intrinsics;
    let mut hits = Vec::with_capacity(req.width as usize * req.height as usize);
    for y in 0..req.height {
        for x in 0..req.width {
            let dir_cam = Vector3::new(
                (f64::from(x) + 0.5 - intr.cx) / intr.fx,
                (f64::from(y) + 0.5 - intr.cy) / intr.fy,
                1.0,
            );
            let through = req.pose.center + req.pose.rotation * dir_cam;
            hits.push(ray_plane_intersect(&req.pose.center, &through, plane).ok());
        }
    }
    hits
}

/// Floating-point render before quantization.
pub fn synthetic_render_float(
    texture: &RasterImage,
    window: &FootprintRect,
    plane: &GroundPlane,
    req: &RenderRequest,
    valid_region: Option<&FootprintRect>,
    blur_radius: f64,
) -> Result<FloatImage, EngineError> {
    req.validate()?;
    if texture.width == 0 || texture.height == 0 {
        return Err(EngineError::InvalidRequest("empty texture".into()));
    }
    if blur_radius.is_nan() || blur_radius < 0.0 {
        return Err(EngineError::InvalidRequest(format!("blur radius must be >= 0, got {blur_radius}")));
    }
    let hits = pixel_ground_hits(req, plane);
    let mut sharp = FloatImage::zeros(req.width, req.height);
    for (p, hit) in hits.iter().enumerate() {
        let rgb = match hit {
            Some([u, v]) => sample_texture(texture, window, *u, *v),
            None => [MISS_GRAY; 3],
        };
        sharp.data[3 * p..3 * p + 3].copy_from_slice(&rgb);
    }
    let inside = |hit: &Option<[f64; 2]>| match (hit, valid_region) {
        (Some([u, v]), Some(region)) => region.contains_point(*u, *v),
        (Some(_), None) => true,
        (None, _) => false,
    };
    if hits.iter().all(inside) {
        return Ok(sharp);
    }
    let blurred = gaussian_blur(&sharp, blur_radius);
    let mut out = sharp;
    for (p, hit) in hits.iter().enumerate() {
        if hit.is_none() {
            continue;
        }
        if !inside(hit) {
            out.data[3 * p..3 * p + 3].copy_from_slice(&blurred.data[3 * p..3 * p + 3]);
        }
    }
    Ok(out)
}

/// Renders the textured plane: sharp where the pixel's ground hit lies in
/// `valid_region`, blurred with σ = `blur_radius` image pixels elsewhere,
/// mid-gray where the ray misses the plane. `None` means valid everywhere.
pub fn synthetic_render(
    texture: &RasterImage,
    window: &FootprintRect,
    plane: &GroundPlane,
    req: &RenderRequest,
    valid_region: Option<&FootprintRect>,
    blur_radius: f64,
) -> Result<RasterImage, EngineError> {
    Ok(synthetic_render_float(texture, window, plane, req, valid_region, blur_radius)?.quantize())
}

/// Textured ground plane shared by all synthetic models of a fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub schema_version: u32,
    /// Texture PNG, relative to the scene file's directory.
    pub texture: PathBuf,
    pub window: FootprintRect,
    pub plane: GroundPlane,
}

impl SyntheticScene {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        crate::read_json(path)
    }

    pub fn texture_path(&self, scene_file: &Path) -> PathBuf {
        scene_file.parent().unwrap_or(Path::new(".")).join(&self.texture)
    }
}

/// Parameters stored as a synthetic model's artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticArtifact {
    pub schema_version: u32,
    pub scene_file: PathBuf,
    pub valid_region: FootprintRect,
    pub blur_radius: f64,
    pub training_iterations: u32,
}

/// "Trains" a synthetic model by recording its valid region.
#[derive(Debug, Clone)]
pub struct SyntheticTrainer {
    pub scene_file: PathBuf,
    pub blur_radius: f64,
}

impl Trainer for SyntheticTrainer {
    fn train(&self, job: &SubSceneModel) -> Result<(), EngineError> {
        let artifact = SyntheticArtifact {
            schema_version: crate::SCHEMA_VERSION,
            scene_file: self.scene_file.clone(),
            valid_region: job.footprint,
            blur_radius: self.blur_radius,
            training_iterations: job.training_iterations,
        };
        crate::write_json(&job.artifact_path, &artifact)?;
        Ok(())
    }
}

struct LoadedScene {
    scene: SyntheticScene,
    texture: RasterImage,
}

/// Render engine for synthetic models. Scenes and textures are loaded once
/// and cached.
#[derive(Default)]
pub struct SyntheticEngine {
    cache: Mutex<HashMap<PathBuf, Arc<LoadedScene>>>,
}

impl SyntheticEngine {
    pub fn new() -> Self {
        Self::default()
    }

    fn scene(&self, path: &Path) -> Result<Arc<LoadedScene>, EngineError> {
        let mut cache = self.cache.lock().expect("scene cache poisoned");
        if let Some(s) = cache.get(path) {
            return Ok(Arc::clone(s));
        }
        let scene = SyntheticScene::load(path)?;
        let texture = RasterImage::load_png(&scene.texture_path(path))
            .map_err(|e| EngineError::Failed(format!("texture: {e}")))?;
        let loaded = Arc::new(LoadedScene { scene, texture });
        cache.insert(path.to_path_buf(), Arc::clone(&loaded));
        Ok(loaded)
    }
}

impl RenderEngine for SyntheticEngine {
    fn render(&self, model: &SubSceneModel, req: &RenderRequest) -> Result<RasterImage, EngineError> {
        let artifact: SyntheticArtifact = crate::read_json(&model.artifact_path)?;
        let loaded = self.scene(&artifact.scene_file)?;
        synthetic_render(
            &loaded.texture,
            &loaded.scene.window,
            &loaded.scene.plane,
            req,
            Some(&artifact.valid_region),
            artifact.blur_radius,
        )
    }
}
