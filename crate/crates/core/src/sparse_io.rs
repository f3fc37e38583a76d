//! Reader and writer for sparse reconstructions in the COLMAP text format.
//!
//! A reconstruction directory holds three files:
//! - `cameras.txt`: `CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]`
//! - `images.txt`: `IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME`, each followed
//!   by one line of 2D observations (ignored here)
//! - `points3D.txt`: `POINT3D_ID X Y Z R G B ERROR TRACK[]`
//!
//! COLMAP stores world-to-camera poses. Everything downstream works with
//! camera-to-world poses, so the conversion happens once, here.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CAMERAS_FILE: &str = "cameras.txt";
pub const IMAGES_FILE: &str = "images.txt";
pub const POINTS_FILE: &str = "points3D.txt";

#[derive(Debug, Error)]
pub enum SparseIoError {
    #[error("line {line}: unsupported camera model `{model}` (only PINHOLE and SIMPLE_PINHOLE)")]
    UnsupportedModel { line: usize, model: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing input file {0}")]
    MissingInput(PathBuf),

    #[error("inconsistent reconstruction: {0}")]
    Consistency(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl SparseIoError {
    fn parse(line: usize, message: impl Into<String>) -> Self {
        SparseIoError::Parse {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SparseIoError>;

/// Pinhole camera intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeIntrinsics {
    pub camera_id: u32,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl PinholeIntrinsics {
    /// Checks the intrinsics invariants, returning a description of the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err(format!(
                "image size must be positive, got {}x{}",
                self.width, self.height
            ));
        }
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            ));
        }
        if !(self.cx > 0.0 && self.cx < f64::from(self.width)) {
            return Err(format!(
                "principal point cx={} outside (0, {})",
                self.cx, self.width
            ));
        }
        if !(self.cy > 0.0 && self.cy < f64::from(self.height)) {
            return Err(format!(
                "principal point cy={} outside (0, {})",
                self.cy, self.height
            ));
        }
        Ok(())
    }
}

/// Camera-to-world pose. `rotation` maps camera-frame directions into the
/// world frame and `center` is the optical center in world coordinates, so
/// a camera-frame point `p` lands at `rotation * p + center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, center: Vector3<f64>) -> Self {
        Self { rotation, center }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    /// Builds a pose from a COLMAP world-to-camera quaternion `(w, x, y, z)`
    /// and translation. The quaternion need not be normalized.
    pub fn from_world_to_camera(qvec: [f64; 4], tvec: Vector3<f64>) -> Option<Self> {
        let r_wc = unit_quaternion(qvec)?.to_rotation_matrix().into_inner();
        let rotation = r_wc.transpose();
        Some(Self::new(rotation, -(rotation * tvec)))
    }

    /// Builds a pose from a camera-to-world quaternion `(w, x, y, z)` and an
    /// optical center.
    pub fn from_camera_to_world(qvec: [f64; 4], center: Vector3<f64>) -> Option<Self> {
        let rotation = unit_quaternion(qvec)?.to_rotation_matrix().into_inner();
        Some(Self::new(rotation, center))
    }

    /// Inverse of [`CameraPose::from_world_to_camera`]. The returned
    /// quaternion has a non-negative scalar part.
    pub fn to_world_to_camera(&self) -> ([f64; 4], Vector3<f64>) {
        let r_wc = self.rotation.transpose();
        let t = -(r_wc * self.center);
        (canonical_qvec(&r_wc), t)
    }

    /// Camera-to-world rotation as a quaternion `(w, x, y, z)` with `w >= 0`.
    pub fn camera_to_world_qvec(&self) -> [f64; 4] {
        canonical_qvec(&self.rotation)
    }

    /// Maps a camera-frame point into the world frame.
    pub fn transform_point(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.center
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        gram.amax().max((self.rotation.determinant() - 1.0).abs())
    }
}

fn unit_quaternion(qvec: [f64; 4]) -> Option<UnitQuaternion<f64>> {
    let q = Quaternion::new(qvec[0], qvec[1], qvec[2], qvec[3]);
    let norm = q.norm();
    if !norm.is_finite() || norm < 1e-12 {
        return None;
    }
    Some(UnitQuaternion::new_normalize(q))
}

fn canonical_qvec(rotation: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*rotation));
    let q = q.into_inner();
    let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
    [sign * q.w, sign * q.i, sign * q.j, sign * q.k]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsePoint {
    pub id: u64,
    pub position: Vector3<f64>,
    pub color: Option<[u8; 3]>,
    pub error: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsePointCloud {
    pub points: Vec<SparsePoint>,
}

impl SparsePointCloud {
    pub fn positions(&self) -> impl Iterator<Item = &Vector3<f64>> + '_ {
        self.points.iter().map(|p| &p.position)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A registered image: its identity, which intrinsics it uses, and its pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub image_id: u32,
    pub name: String,
    pub camera_id: u32,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub intrinsics: BTreeMap<u32, PinholeIntrinsics>,
    pub views: Vec<View>,
    pub cloud: SparsePointCloud,
}

impl Reconstruction {
    /// Cross-checks the parts and assembles a reconstruction.
    pub fn new(
        intrinsics: BTreeMap<u32, PinholeIntrinsics>,
        views: Vec<View>,
        cloud: SparsePointCloud,
    ) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut names = HashSet::new();
        for view in &views {
            if !intrinsics.contains_key(&view.camera_id) {
                return Err(SparseIoError::Consistency(format!(
                    "image {} references unknown camera {}",
                    view.image_id, view.camera_id
                )));
            }
            if !ids.insert(view.image_id) {
                return Err(SparseIoError::Consistency(format!(
                    "duplicate image id {}",
                    view.image_id
                )));
            }
            if !names.insert(view.name.as_str()) {
                return Err(SparseIoError::Consistency(format!(
                    "duplicate image name {}",
                    view.name
                )));
            }
        }
        Ok(Self {
            intrinsics,
            views,
            cloud,
        })
    }

    pub fn view(&self, image_id: u32) -> Option<&View> {
        self.views.iter().find(|v| v.image_id == image_id)
    }

    pub fn view_by_name(&self, name: &str) -> Option<&View> {
        self.views.iter().find(|v| v.name == name)
    }

    /// Intrinsics of a view. Always present for a validated reconstruction.
    pub fn intrinsics_of(&self, view: &View) -> &PinholeIntrinsics {
        &self.intrinsics[&view.camera_id]
    }

    pub fn camera_centers(&self) -> Vec<Vector3<f64>> {
        self.views.iter().map(|v| v.pose.center).collect()
    }

    pub fn image_ids(&self) -> Vec<u32> {
        self.views.iter().map(|v| v.image_id).collect()
    }
}

/// Non-comment lines with their 1-based line numbers.
fn content_lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(idx, line)| match line {
            Ok(line) if line.trim_start().starts_with('#') => None,
            Ok(line) => Some(Ok((idx + 1, line))),
            Err(e) => Some(Err(e.into())),
        })
}

fn field<T: std::str::FromStr>(tokens: &[&str], idx: usize, line: usize, name: &str) -> Result<T> {
    let raw = tokens
        .get(idx)
        .ok_or_else(|| SparseIoError::parse(line, format!("missing field {name}")))?;
    raw.parse()
        .map_err(|_| SparseIoError::parse(line, format!("invalid {name} `{raw}`")))
}

fn finite(value: f64, line: usize, name: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(SparseIoError::parse(line, format!("non-finite {name}")))
    }
}

pub fn parse_cameras<R: BufRead>(reader: R) -> Result<BTreeMap<u32, PinholeIntrinsics>> {
    let mut cameras = BTreeMap::new();
    for entry in content_lines(reader) {
        let (line, text) = entry?;
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let camera_id: u32 = field(&tokens, 0, line, "CAMERA_ID")?;
        let model: &str = tokens
            .get(1)
            .ok_or_else(|| SparseIoError::parse(line, "missing field MODEL"))?;
        let width: u32 = field(&tokens, 2, line, "WIDTH")?;
        let height: u32 = field(&tokens, 3, line, "HEIGHT")?;
        let params = tokens[4.min(tokens.len())..]
            .iter()
            .map(|raw| {
                raw.parse::<f64>()
                    .map_err(|_| SparseIoError::parse(line, format!("invalid parameter `{raw}`")))
                    .and_then(|v| finite(v, line, "parameter"))
            })
            .collect::<Result<Vec<f64>>>()?;
        let (fx, fy, cx, cy) = match (model, params.as_slice()) {
            ("PINHOLE", &[fx, fy, cx, cy]) => (fx, fy, cx, cy),
            ("SIMPLE_PINHOLE", &[f, cx, cy]) => (f, f, cx, cy),
            ("PINHOLE" | "SIMPLE_PINHOLE", _) => {
                return Err(SparseIoError::parse(
                    line,
                    format!("wrong parameter count {} for {model}", params.len()),
                ))
            }
            _ => {
                return Err(SparseIoError::UnsupportedModel {
                    line,
                    model: model.to_string(),
                })
            }
        };
        let intrinsics = PinholeIntrinsics {
            camera_id,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
        };
        intrinsics
            .validate()
            .map_err(|msg| SparseIoError::parse(line, msg))?;
        if cameras.insert(camera_id, intrinsics).is_some() {
            return Err(SparseIoError::parse(
                line,
                format!("duplicate camera id {camera_id}"),
            ));
        }
    }
    Ok(cameras)
}

/// Parses `images.txt`. Blank lines are only skipped where a pose line is
/// expected; an empty observation line is legitimate.
pub fn parse_images<R: BufRead>(reader: R) -> Result<Vec<View>> {
    let mut views = Vec::new();
    let mut pending: Option<usize> = None;
    for entry in content_lines(reader) {
        let (line, text) = entry?;
        if pending.take().is_some() {
            // observations line, discarded
            continue;
        }
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let image_id: u32 = field(&tokens, 0, line, "IMAGE_ID")?;
        let mut q = [0.0; 4];
        for (i, name) in ["QW", "QX", "QY", "QZ"].iter().enumerate() {
            q[i] = finite(field(&tokens, 1 + i, line, name)?, line, name)?;
        }
        let mut t = Vector3::zeros();
        for (i, name) in ["TX", "TY", "TZ"].iter().enumerate() {
            t[i] = finite(field(&tokens, 5 + i, line, name)?, line, name)?;
        }
        let camera_id: u32 = field(&tokens, 8, line, "CAMERA_ID")?;
        if tokens.len() < 10 {
            return Err(SparseIoError::parse(line, "missing field NAME"));
        }
        // Names may contain spaces; take the rest of the line.
        let name = tokens[9..].join(" ");
        let pose = CameraPose::from_world_to_camera(q, t)
            .ok_or_else(|| SparseIoError::parse(line, "quaternion cannot be normalized"))?;
        views.push(View {
            image_id,
            name,
            camera_id,
            pose,
        });
        pending = Some(line);
    }
    if let Some(line) = pending {
        return Err(SparseIoError::parse(
            line,
            "pose line without a following observations line",
        ));
    }
    Ok(views)
}

pub fn parse_points3d<R: BufRead>(reader: R) -> Result<SparsePointCloud> {
    let mut points = Vec::new();
    let mut seen = HashSet::new();
    for entry in content_lines(reader) {
        let (line, text) = entry?;
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let id: u64 = field(&tokens, 0, line, "POINT3D_ID")?;
        let mut position = Vector3::zeros();
        for (i, name) in ["X", "Y", "Z"].iter().enumerate() {
            position[i] = finite(field(&tokens, 1 + i, line, name)?, line, name)?;
        }
        let color = if tokens.len() >= 7 {
            Some([
                field(&tokens, 4, line, "R")?,
                field(&tokens, 5, line, "G")?,
                field(&tokens, 6, line, "B")?,
            ])
        } else {
            None
        };
        let error = if tokens.len() >= 8 {
            Some(finite(field(&tokens, 7, line, "ERROR")?, line, "ERROR")?)
        } else {
            None
        };
        if !seen.insert(id) {
            return Err(SparseIoError::parse(line, format!("duplicate point id {id}")));
        }
        points.push(SparsePoint {
            id,
            position,
            color,
            error,
        });
    }
    Ok(SparsePointCloud { points })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    match File::open(path) {
        Ok(file) => Ok(BufReader::new(file)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(SparseIoError::MissingInput(path.to_path_buf()))
        }
        Err(e) => Err(e.into()),
    }
}

/// Loads and cross-references a reconstruction directory.
pub fn load_reconstruction(dir: &Path) -> Result<Reconstruction> {
    let cameras = parse_cameras(open(&dir.join(CAMERAS_FILE))?)?;
    let views = parse_images(open(&dir.join(IMAGES_FILE))?)?;
    let cloud = parse_points3d(open(&dir.join(POINTS_FILE))?)?;
    Reconstruction::new(cameras, views, cloud)
}

pub fn format_cameras(cameras: &BTreeMap<u32, PinholeIntrinsics>) -> String {
    let mut out = String::from("# Camera list with one line of data per camera:\n");
    out.push_str("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let _ = writeln!(out, "# Number of cameras: {}", cameras.len());
    for c in cameras.values() {
        let _ = writeln!(
            out,
            "{} PINHOLE {} {} {} {} {} {}",
            c.camera_id, c.width, c.height, c.fx, c.fy, c.cx, c.cy
        );
    }
    out
}

pub fn format_images(views: &[View]) -> String {
    let mut out = String::from("# Image list with two lines of data per image:\n");
    out.push_str("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
    out.push_str("#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    let _ = writeln!(out, "# Number of images: {}", views.len());
    for v in views {
        let (q, t) = v.pose.to_world_to_camera();
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {}",
            v.image_id, q[0], q[1], q[2], q[3], t.x, t.y, t.z, v.camera_id, v.name
        );
        out.push('\n');
    }
    out
}

pub fn format_points3d(cloud: &SparsePointCloud) -> String {
    let mut out = String::from("# 3D point list with one line of data per point:\n");
    out.push_str("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    let _ = writeln!(out, "# Number of points: {}", cloud.points.len());
    for p in &cloud.points {
        let _ = write!(
            out,
            "{} {} {} {}",
            p.id, p.position.x, p.position.y, p.position.z
        );
        // ERROR is positional after RGB, so a missing color forces a default.
        match (p.color, p.error) {
            (Some([r, g, b]), Some(e)) => {
                let _ = write!(out, " {r} {g} {b} {e}");
            }
            (Some([r, g, b]), None) => {
                let _ = write!(out, " {r} {g} {b}");
            }
            (None, Some(e)) => {
                let _ = write!(out, " 128 128 128 {e}");
            }
            (None, None) => {}
        }
        out.push('\n');
    }
    out
}

/// Writes the three text files into `dir`, creating it if needed.
pub fn write_reconstruction(dir: &Path, recon: &Reconstruction) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CAMERAS_FILE), format_cameras(&recon.intrinsics))?;
    std::fs::write(dir.join(IMAGES_FILE), format_images(&recon.views))?;
    std::fs::write(dir.join(POINTS_FILE), format_points3d(&recon.cloud))?;
    Ok(())
}
