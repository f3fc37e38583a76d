//! Ground plane estimation and footprint ("projection box") computation.
//!
//! Image corners are lifted into the world through the camera pose, the
//! rays from the optical center through those corners are intersected with
//! the ground plane, and the axis-aligned bounding rectangle of the hits in
//! the plane's 2D frame is the camera's footprint.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposition::SubScene;
use crate::sparse_io::{CameraPose, PinholeIntrinsics, Reconstruction, SparsePointCloud};

/// Default share of points dropped before the second plane fit.
pub const DEFAULT_TRIM_FRACTION: f64 = 0.1;

const PARALLEL_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("ray is parallel to the ground plane")]
    RayParallel,
    #[error("ray meets the ground plane behind its origin")]
    IntersectBehind,
    #[error("camera {image_id:?} sees the horizon; footprint is unbounded")]
    Horizon { image_id: Option<u32> },
    #[error("sub-scene references unknown image {0}")]
    UnknownImage(u32),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Plane `{x : normal·x + offset = 0}` with an orthonormal in-plane basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub basis_u: Vector3<f64>,
    pub basis_v: Vector3<f64>,
}

impl GroundPlane {
    /// Builds a plane from any non-zero normal, fixing the sign convention
    /// and the in-plane basis deterministically.
    pub fn from_normal_and_point(normal: Vector3<f64>, point: &Vector3<f64>) -> Result<Self> {
        let norm = normal.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(GeometryError::DegenerateGeometry("zero plane normal".into()));
        }
        let mut n = normal / norm;
        if n[n.iamax()] < 0.0 {
            n = -n;
        }
        let (basis_u, basis_v) = plane_basis(&n);
        Ok(Self {
            normal: n,
            offset: -n.dot(point),
            basis_u,
            basis_v,
        })
    }

    /// The horizontal plane `z = height`.
    pub fn horizontal(height: f64) -> Self {
        Self::from_normal_and_point(Vector3::z(), &Vector3::new(0.0, 0.0, height))
            .expect("unit normal")
    }

    /// Origin of the 2D plane frame: the point of the plane closest to the world origin.
    pub fn origin(&self) -> Vector3<f64> {
        -self.offset * self.normal
    }

    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        self.normal.dot(x) + self.offset
    }

    pub fn to_plane_coords(&self, x: &Vector3<f64>) -> [f64; 2] {
        let rel = x - self.origin();
        [rel.dot(&self.basis_u), rel.dot(&self.basis_v)]
    }

    pub fn from_plane_coords(&self, uv: [f64; 2]) -> Vector3<f64> {
        self.origin() + uv[0] * self.basis_u + uv[1] * self.basis_v
    }
}

/// In-plane basis: `u` is the world x-axis projected onto the plane (the
/// y-axis when x is nearly normal to it) and `v = n × u`, so `(u, v, n)` is
/// right-handed.
fn plane_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let project = |axis: Vector3<f64>| axis - n * n.dot(&axis);
    let mut u = project(Vector3::x());
    if u.norm() < 1e-6 {
        u = project(Vector3::y());
    }
    let u = u.normalize();
    let v = n.cross(&u).normalize();
    (u, v)
}

/// Total least squares plane through `points`. Fails if they are collinear
/// or coincident.
fn fit_points(points: &[Vector3<f64>]) -> Result<GroundPlane> {
    if points.len() < 3 {
        return Err(GeometryError::DegenerateGeometry(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (smallest, middle, largest) = (order[0], order[1], order[2]);
    let lmax = eig.eigenvalues[largest];
    if lmax.is_nan() || lmax <= 0.0 || eig.eigenvalues[middle] <= 1e-12 * lmax {
        return Err(GeometryError::DegenerateGeometry(
            "points are collinear or coincident".into(),
        ));
    }
    let normal = eig.eigenvectors.column(smallest).into_owned();
    GroundPlane::from_normal_and_point(normal, &centroid)
}

/// Fits the ground plane to a sparse cloud.
///
/// With `trim_fraction > 0` a second fit runs after discarding that share of
/// points farthest from the first plane.
pub fn fit_plane(cloud: &SparsePointCloud, trim_fraction: f64) -> Result<GroundPlane> {
    if !(0.0..0.5).contains(&trim_fraction) {
        return Err(GeometryError::InvalidParameter(format!(
            "trim_fraction must lie in [0, 0.5), got {trim_fraction}"
        )));
    }
    let points: Vec<Vector3<f64>> = cloud.positions().copied().collect();
    let plane = fit_points(&points)?;
    let drop = (trim_fraction * points.len() as f64).floor() as usize;
    if drop == 0 {
        return Ok(plane);
    }
    let mut ranked: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (plane.signed_distance(p).abs(), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let kept: Vec<Vector3<f64>> = ranked[..points.len() - drop]
        .iter()
        .map(|&(_, i)| points[i])
        .collect();
    fit_points(&kept)
}

/// Axis-aligned rectangle in ground-plane coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FootprintRect {
    pub min_u: f64,
    pub max_u: f64,
    pub min_v: f64,
    pub max_v: f64,
}

impl FootprintRect {
    pub fn new(min_u: f64, max_u: f64, min_v: f64, max_v: f64) -> Self {
        debug_assert!(min_u <= max_u && min_v <= max_v);
        Self {
            min_u,
            max_u,
            min_v,
            max_v,
        }
    }

    /// Bounding rectangle of a non-empty point set.
    pub fn bounding(points: impl IntoIterator<Item = [f64; 2]>) -> Option<Self> {
        points.into_iter().fold(None, |acc, [u, v]| {
            Some(match acc {
                None => Self::new(u, u, v, v),
                Some(r) => Self::new(r.min_u.min(u), r.max_u.max(u), r.min_v.min(v), r.max_v.max(v)),
            })
        })
    }

    pub fn union(&self, other: &Self) -> Self {
        Self::new(
            self.min_u.min(other.min_u),
            self.max_u.max(other.max_u),
            self.min_v.min(other.min_v),
            self.max_v.max(other.max_v),
        )
    }

    pub fn width(&self) -> f64 {
        self.max_u - self.min_u
    }

    pub fn height(&self) -> f64 {
        self.max_v - self.min_v
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Closed-set test: touching edges intersect.
    pub fn intersects(&self, other: &Self) -> bool {
        self.min_u <= other.max_u
            && other.min_u <= self.max_u
            && self.min_v <= other.max_v
            && other.min_v <= self.max_v
    }

    /// True iff `inner` lies inside `self`, boundary included.
    pub fn contains(&self, inner: &Self) -> bool {
        self.min_u <= inner.min_u
            && inner.max_u <= self.max_u
            && self.min_v <= inner.min_v
            && inner.max_v <= self.max_v
    }

    pub fn contains_point(&self, u: f64, v: f64) -> bool {
        self.min_u <= u && u <= self.max_u && self.min_v <= v && v <= self.max_v
    }

    /// Area of the overlap; zero for disjoint or edge-touching rectangles.
    pub fn intersection_area(&self, other: &Self) -> f64 {
        let du = self.max_u.min(other.max_u) - self.min_u.max(other.min_u);
        let dv = self.max_v.min(other.max_v) - self.min_v.max(other.min_v);
        if du <= 0.0 || dv <= 0.0 {
            0.0
        } else {
            du * dv
        }
    }

    pub fn translated(&self, du: f64, dv: f64) -> Self {
        Self::new(self.min_u + du, self.max_u + du, self.min_v + dv, self.max_v + dv)
    }
}

/// The four image corners in the camera frame, cyclic from the top-left.
///
/// Per-axis focal lengths are folded into a common depth `fx`, so the
/// vertical coordinate is scaled by `fx / fy`; for square pixels this is
/// just `(x - cx, y - cy, f)`.
pub fn image_corners(intr: &PinholeIntrinsics) -> [Vector3<f64>; 4] {
    let w = f64::from(intr.width);
    let h = f64::from(intr.height);
    let f = intr.fx;
    let aspect = intr.fx / intr.fy;
    let corner = |x: f64, y: f64| Vector3::new(x - intr.cx, (y - intr.cy) * aspect, f);
    [corner(0.0, 0.0), corner(w, 0.0), corner(w, h), corner(0.0, h)]
}

/// Camera-frame point to world frame.
pub fn project_to_world(pose: &CameraPose, p_cam: &Vector3<f64>) -> Vector3<f64> {
    pose.transform_point(p_cam)
}

/// Intersects the forward ray from `origin` through `through` with the plane
/// and returns plane coordinates of the hit.
pub fn ray_plane_intersect(
    origin: &Vector3<f64>,
    through: &Vector3<f64>,
    plane: &GroundPlane,
) -> Result<[f64; 2]> {
    let dir = through - origin;
    let denom = plane.normal.dot(&dir);
    if denom.abs() < PARALLEL_EPS {
        return Err(GeometryError::RayParallel);
    }
    let t = -plane.signed_distance(origin) / denom;
    if t.is_nan() || t <= 0.0 {
        return Err(GeometryError::IntersectBehind);
    }
    Ok(plane.to_plane_coords(&(origin + t * dir)))
}

/// Projection box of one camera on the ground plane.
pub fn camera_footprint(
    intr: &PinholeIntrinsics,
    pose: &CameraPose,
    plane: &GroundPlane,
) -> Result<FootprintRect> {
    let mut hits = [[0.0; 2]; 4];
    for (hit, corner) in hits.iter_mut().zip(image_corners(intr)) {
        let world = project_to_world(pose, &corner);
        *hit = ray_plane_intersect(&pose.center, &world, plane)
            .map_err(|_| GeometryError::Horizon { image_id: None })?;
    }
    Ok(FootprintRect::bounding(hits).expect("four hits"))
}

/// Union of member camera footprints.
pub fn subscene_footprint(
    subscene: &SubScene,
    recon: &Reconstruction,
    plane: &GroundPlane,
) -> Result<FootprintRect> {
    let mut rect: Option<FootprintRect> = None;
    for &image_id in &subscene.member_image_ids {
        let view = recon.view(image_id).ok_or(GeometryError::UnknownImage(image_id))?;
        let fp = camera_footprint(recon.intrinsics_of(view), &view.pose, plane).map_err(|e| match e {
            GeometryError::Horizon { .. } => GeometryError::Horizon {
                image_id: Some(image_id),
            },
            other => other,
        })?;
        rect = Some(rect.map_or(fp, |r| r.union(&fp)));
    }
    rect.ok_or_else(|| GeometryError::DegenerateGeometry(format!("sub-scene {} has no members", subscene.id)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OwnerKind {
    Camera,
    Subscene,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FootprintEntry {
    pub owner_kind: OwnerKind,
    pub owner_id: u32,
    pub min_u: f64,
    pub min_v: f64,
    pub max_u: f64,
    pub max_v: f64,
    /// Sub-scene cluster center; used to break ties between containing sub-scenes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vector3<f64>>,
}

impl FootprintEntry {
    pub fn rect(&self) -> FootprintRect {
        FootprintRect::new(self.min_u, self.max_u, self.min_v, self.max_v)
    }
}

/// Persisted ground plane plus camera and sub-scene footprints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintIndex {
    pub schema_version: u32,
    pub config_hash: String,
    pub plane: GroundPlane,
    pub entries: Vec<FootprintEntry>,
}

impl FootprintIndex {
    /// Computes every camera and sub-scene footprint.
    pub fn build(
        recon: &Reconstruction,
        subscenes: &[SubScene],
        plane: GroundPlane,
        config_hash: &str,
    ) -> Result<Self> {
        let mut camera_rects = HashMap::new();
        let mut entries = Vec::new();
        for view in &recon.views {
            let rect = camera_footprint(recon.intrinsics_of(view), &view.pose, &plane).map_err(|_| {
                GeometryError::Horizon {
                    image_id: Some(view.image_id),
                }
            })?;
            camera_rects.insert(view.image_id, rect);
            entries.push(entry(OwnerKind::Camera, view.image_id, rect, None));
        }
        for s in subscenes {
            let rect = s
                .member_image_ids
                .iter()
                .map(|id| camera_rects.get(id).copied().ok_or(GeometryError::UnknownImage(*id)))
                .try_fold(None::<FootprintRect>, |acc, r| {
                    r.map(|r| Some(acc.map_or(r, |a| a.union(&r))))
                })?
                .ok_or_else(|| GeometryError::DegenerateGeometry(format!("sub-scene {} has no members", s.id)))?;
            entries.push(entry(OwnerKind::Subscene, s.id, rect, Some(s.center)));
        }
        Ok(Self {
            schema_version: crate::SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            plane,
            entries,
        })
    }

    pub fn subscene_entries(&self) -> impl Iterator<Item = &FootprintEntry> + '_ {
        self.entries.iter().filter(|e| e.owner_kind == OwnerKind::Subscene)
    }

    pub fn subscene_footprints(&self) -> std::collections::BTreeMap<u32, FootprintRect> {
        self.subscene_entries().map(|e| (e.owner_id, e.rect())).collect()
    }

    pub fn footprint(&self, kind: OwnerKind, id: u32) -> Option<FootprintRect> {
        self.entries
            .iter()
            .find(|e| e.owner_kind == kind && e.owner_id == id)
            .map(FootprintEntry::rect)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        crate::write_json(path, self)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        crate::read_json(path)
    }
}

fn entry(owner_kind: OwnerKind, owner_id: u32, r: FootprintRect, center: Option<Vector3<f64>>) -> FootprintEntry {
    FootprintEntry {
        owner_kind,
        owner_id,
        min_u: r.min_u,
        min_v: r.min_v,
        max_u: r.max_u,
        max_v: r.max_v,
        center,
    }
}
