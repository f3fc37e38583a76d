//! Synthetic aerial survey: a nadir camera grid over a textured plane.
//!
//! The generator writes a COLMAP text reconstruction, the scene description
//! consumed by the synthetic engine, held-out query cameras and their
//! full-coverage ground-truth renders.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ground::{FootprintRect, GroundPlane};
use crate::orchestration::synthetic::{synthetic_render, SyntheticScene};
use crate::orchestration::{EngineError, RenderRequest};
use crate::raster::{RasterError, RasterImage};
use crate::registration::{QueryCamera, QuerySet};
use crate::sparse_io::{
    write_reconstruction, CameraPose, PinholeIntrinsics, Reconstruction, SparseIoError, SparsePoint, SparsePointCloud,
    View,
};

pub const SPARSE_DIR: &str = "sparse";
pub const IMAGES_DIR: &str = "images";
pub const GROUND_TRUTH_DIR: &str = "ground_truth";
pub const SCENE_FILE: &str = "scene.json";
pub const TEXTURE_FILE: &str = "texture.png";
pub const QUERIES_FILE: &str = "queries.json";

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("invalid fixture spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sparse(#[from] SparseIoError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Render(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    /// Ground extent covered by the camera grid, world units along x and y.
    pub extent: [f64; 2],
    /// Cameras along x and y.
    pub grid: [u32; 2],
    pub altitude: f64,
    pub image_size: [u32; 2],
    /// Fraction of a footprint shared with the next camera along x; sets
    /// the focal length.
    pub overlap: f64,
    pub texture_px_per_unit: f64,
    /// Border added around the extent when texturing.
    pub texture_margin: f64,
    pub noise_seed: u64,
    /// Perturbs every training pose when set.
    pub jitter_seed: Option<u64>,
    pub jitter_position: f64,
    pub jitter_angle_deg: f64,
    pub queries: usize,
    /// Query cameras fly higher than the survey so that their footprints
    /// span several sub-scenes.
    pub query_altitude: f64,
    pub cloud_spacing: f64,
    /// Also render the training views into `images/`.
    pub write_images: bool,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            extent: [100.0, 50.0],
            grid: [20, 10],
            altitude: 10.0,
            image_size: [160, 120],
            overlap: 0.3,
            texture_px_per_unit: 20.0,
            texture_margin: 5.0,
            noise_seed: 0,
            jitter_seed: None,
            jitter_position: 0.05,
            jitter_angle_deg: 0.5,
            queries: 20,
            query_altitude: 30.0,
            cloud_spacing: 1.0,
            write_images: true,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<(), FixtureError> {
        let bad = |msg: String| Err(FixtureError::Invalid(msg));
        if !(self.extent.iter().all(|e| e.is_finite() && *e > 0.0)) {
            return bad(format!("extent must be positive, got {:?}", self.extent));
        }
        if self.grid.contains(&0) {
            return bad(format!("grid must be at least 1x1, got {:?}", self.grid));
        }
        if !(self.altitude.is_finite() && self.altitude > 0.0 && self.query_altitude.is_finite() && self.query_altitude > 0.0) {
            return bad(format!("altitudes must be > 0, got {} and {}", self.altitude, self.query_altitude));
        }
        if self.image_size.iter().any(|&s| s < 11) {
            return bad(format!("images must be at least 11x11, got {:?}", self.image_size));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad(format!("overlap must be in [0, 1), got {}", self.overlap));
        }
        if !(self.texture_px_per_unit > 0.0 && self.texture_margin >= 0.0 && self.cloud_spacing > 0.0) {
            return bad("texture resolution and cloud spacing must be > 0, margin >= 0".into());
        }
        if !(self.jitter_position >= 0.0 && self.jitter_angle_deg >= 0.0) {
            return bad("jitter magnitudes must be >= 0".into());
        }
        Ok(())
    }

    pub fn spacing(&self) -> [f64; 2] {
        [
            self.extent[0] / f64::from(self.grid[0]),
            self.extent[1] / f64::from(self.grid[1]),
        ]
    }

    /// Nadir footprint width along x: spacing / (1 - overlap).
    pub fn footprint_width(&self) -> f64 {
        self.spacing()[0] / (1.0 - self.overlap)
    }

    /// Similar triangles: width / f = footprint / altitude.
    pub fn focal(&self) -> f64 {
        f64::from(self.image_size[0]) * self.altitude / self.footprint_width()
    }

    pub fn intrinsics(&self, camera_id: u32) -> PinholeIntrinsics {
        let f = self.focal();
        PinholeIntrinsics {
            camera_id,
            width: self.image_size[0],
            height: self.image_size[1],
            fx: f,
            fy: f,
            cx: f64::from(self.image_size[0]) / 2.0,
            cy: f64::from(self.image_size[1]) / 2.0,
        }
    }

    /// Half extents of a nadir footprint at `altitude`.
    pub fn half_footprint(&self, altitude: f64) -> [f64; 2] {
        let f = self.focal();
        [
            f64::from(self.image_size[0]) / (2.0 * f) * altitude,
            f64::from(self.image_size[1]) / (2.0 * f) * altitude,
        ]
    }

    /// Union of the unperturbed survey footprints.
    pub fn survey_coverage(&self) -> FootprintRect {
        let [sx, sy] = self.spacing();
        let [hw, hh] = self.half_footprint(self.altitude);
        FootprintRect::new(
            sx / 2.0 - hw,
            self.extent[0] - sx / 2.0 + hw,
            sy / 2.0 - hh,
            self.extent[1] - sy / 2.0 + hh,
        )
    }

    /// Query centers whose footprint stays inside the survey coverage.
    pub fn query_center_range(&self) -> Result<FootprintRect, FixtureError> {
        let cov = self.survey_coverage();
        let [hw, hh] = self.half_footprint(self.query_altitude);
        if cov.width() < 2.0 * hw || cov.height() < 2.0 * hh {
            return Err(FixtureError::Invalid(format!(
                "query footprint {}x{} exceeds the survey coverage",
                2.0 * hw,
                2.0 * hh
            )));
        }
        Ok(FootprintRect::new(cov.min_u + hw, cov.max_u - hw, cov.min_v + hh, cov.max_v - hh))
    }

    pub fn texture_window(&self) -> FootprintRect {
        let m = self.texture_margin;
        FootprintRect::new(-m, self.extent[0] + m, -m, self.extent[1] + m)
    }
}

/// Camera looking straight down (-z) with image x along world +x.
pub fn nadir_pose(x: f64, y: f64, altitude: f64) -> CameraPose {
    CameraPose::new(Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)), Vector3::new(x, y, altitude))
}

/// Deterministic texture: smooth color waves, translucent blocks and
/// per-pixel noise.
pub fn generate_texture(width: u32, height: u32, px_per_unit: f64, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            [
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(20.0..40.0),
            ]
        })
        .collect();
    let mut field = vec![0.0f64; width as usize * height as usize * 3];
    for y in 0..height as usize {
        for x in 0..width as usize {
            let (u, v) = (x as f64 / px_per_unit, y as f64 / px_per_unit);
            for c in 0..3 {
                let wave: f64 = waves[3 * c..3 * c + 3]
                    .iter()
                    .map(|[fu, fv, phase, amp]| amp * (fu * u + fv * v + phase).sin())
                    .sum();
                field[(y * width as usize + x) * 3 + c] = 128.0 + wave;
            }
        }
    }
    let area_units = f64::from(width) * f64::from(height) / (px_per_unit * px_per_unit);
    let blocks = (area_units / 12.0).ceil() as usize;
    for _ in 0..blocks {
        let bw = (rng.random_range(0.5..4.0) * px_per_unit) as usize;
        let bh = (rng.random_range(0.5..4.0) * px_per_unit) as usize;
        let x0 = rng.random_range(0..width as usize);
        let y0 = rng.random_range(0..height as usize);
        let color = [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)];
        for y in y0..(y0 + bh).min(height as usize) {
            for x in x0..(x0 + bw).min(width as usize) {
                let i = (y * width as usize + x) * 3;
                for c in 0..3 {
                    field[i + c] = 0.5 * field[i + c] + 0.5 * color[c];
                }
            }
        }
    }
    let data = field
        .iter()
        .map(|v| (v + rng.random_range(-12.0..12.0)).round().clamp(0.0, 255.0) as u8)
        .collect();
    RasterImage::new(width, height, data).expect("sized buffer")
}

/// In-memory fixture.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub recon: Reconstruction,
    pub texture: RasterImage,
    pub window: FootprintRect,
    pub plane: GroundPlane,
    pub queries: Vec<QueryCamera>,
}

impl Fixture {
    pub fn generate(spec: &FixtureSpec) -> Result<Self, FixtureError> {
        spec.validate()?;
        let window = spec.texture_window();
        let texture = generate_texture(
            (window.width() * spec.texture_px_per_unit).round() as u32,
            (window.height() * spec.texture_px_per_unit).round() as u32,
            spec.texture_px_per_unit,
            spec.noise_seed,
        );
        let plane = GroundPlane::horizontal(0.0);
        let intr = spec.intrinsics(1);
        let [sx, sy] = spec.spacing();

        let mut jitter = spec.jitter_seed.map(ChaCha8Rng::seed_from_u64);
        let mut views = Vec::new();
        for row in 0..spec.grid[1] {
            for col in 0..spec.grid[0] {
                let mut pose = nadir_pose(
                    (f64::from(col) + 0.5) * sx,
                    (f64::from(row) + 0.5) * sy,
                    spec.altitude,
                );
                if let Some(rng) = jitter.as_mut() {
                    let p = spec.jitter_position;
                    let a = spec.jitter_angle_deg.to_radians();
                    let dp = Vector3::new(rng.random_range(-p..=p), rng.random_range(-p..=p), rng.random_range(-p..=p));
                    let axis = Vector3::new(rng.random_range(-a..=a), rng.random_range(-a..=a), rng.random_range(-a..=a));
                    pose = CameraPose::new(
                        Rotation3::from_scaled_axis(axis).matrix() * pose.rotation,
                        pose.center + dp,
                    );
                }
                views.push(View {
                    image_id: row * spec.grid[0] + col + 1,
                    name: format!("cam_{row:03}_{col:03}.png"),
                    camera_id: 1,
                    pose,
                });
            }
        }

        let mut points = Vec::new();
        let nu = (spec.extent[0] / spec.cloud_spacing).floor() as u64;
        let nv = (spec.extent[1] / spec.cloud_spacing).floor() as u64;
        for j in 0..=nv {
            for i in 0..=nu {
                let (u, v) = (i as f64 * spec.cloud_spacing, j as f64 * spec.cloud_spacing);
                let rgb = crate::orchestration::synthetic::sample_texture(&texture, &window, u, v);
                points.push(SparsePoint {
                    id: j * (nu + 1) + i + 1,
                    position: plane.from_plane_coords([u, v]),
                    color: Some(rgb.map(|c| c.round() as u8)),
                    error: Some(0.0),
                });
            }
        }

        let centers = spec.query_center_range()?;
        let mut qrng = ChaCha8Rng::seed_from_u64(spec.noise_seed ^ 0x5155_4552_5953);
        let queries = (0..spec.queries)
            .map(|q| {
                let x = qrng.random_range(centers.min_u..=centers.max_u);
                let y = qrng.random_range(centers.min_v..=centers.max_v);
                QueryCamera::from_pose(&format!("query_{q:03}.png"), intr, &nadir_pose(x, y, spec.query_altitude))
            })
            .collect();

        let recon = Reconstruction::new(BTreeMap::from([(1, intr)]), views, SparsePointCloud { points })?;
        Ok(Self {
            spec: spec.clone(),
            recon,
            texture,
            window,
            plane,
            queries,
        })
    }

    /// Sharp render everywhere: what a model trained on the whole scene
    /// would produce.
    pub fn oracle_render(&self, intrinsics: &PinholeIntrinsics, pose: &CameraPose) -> Result<RasterImage, EngineError> {
        let req = RenderRequest::for_camera(*intrinsics, *pose);
        synthetic_render(&self.texture, &self.window, &self.plane, &req, None, 0.0)
    }

    pub fn scene(&self) -> SyntheticScene {
        SyntheticScene {
            schema_version: crate::SCHEMA_VERSION,
            texture: PathBuf::from(TEXTURE_FILE),
            window: self.window,
            plane: self.plane,
        }
    }

    /// Writes the fixture under `dir`; returns the scene file path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, FixtureError> {
        write_reconstruction(&dir.join(SPARSE_DIR), &self.recon)?;
        self.texture.save_png(&dir.join(TEXTURE_FILE))?;
        let scene_path = dir.join(SCENE_FILE);
        crate::write_json(&scene_path, &self.scene())?;
        QuerySet {
            schema_version: crate::SCHEMA_VERSION,
            queries: self.queries.clone(),
        }
        .save(&dir.join(QUERIES_FILE))?;
        for q in &self.queries {
            let pose = q.pose().ok_or_else(|| FixtureError::Invalid(format!("query {} has no valid pose", q.name)))?;
            self.oracle_render(&q.intrinsics, &pose)?
                .save_png(&dir.join(GROUND_TRUTH_DIR).join(&q.name))?;
        }
        if self.spec.write_images {
            for view in &self.recon.views {
                self.oracle_render(self.recon.intrinsics_of(view), &view.pose)?
                    .save_png(&dir.join(IMAGES_DIR).join(&view.name))?;
            }
        }
        Ok(scene_path)
    }
}
