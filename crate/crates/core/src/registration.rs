//! Registration of novel query views against the sub-scene footprint index.

use std::cmp::Ordering;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ground::{camera_footprint, FootprintIndex, FootprintRect, GroundPlane};
use crate::sparse_io::{CameraPose, PinholeIntrinsics};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("query {0} footprint intersects no sub-scene")]
    OutOfCoverage(String),
    #[error("query {0} sees the horizon; footprint is unbounded")]
    Horizon(String),
}

/// Closed rectangles sharing any point, edges included.
pub fn rect_intersects(a: &FootprintRect, b: &FootprintRect) -> bool {
    a.intersects(b)
}

/// `inner ⊆ outer`, boundary inclusive.
pub fn rect_contains(outer: &FootprintRect, inner: &FootprintRect) -> bool {
    outer.contains(inner)
}

/// One sub-scene in the registration index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexedSubScene {
    pub subscene_id: u32,
    pub footprint: FootprintRect,
    pub center: Vector3<f64>,
}

impl IndexedSubScene {
    pub fn from_index(index: &FootprintIndex) -> Vec<Self> {
        index
            .subscene_entries()
            .map(|e| Self {
                subscene_id: e.owner_id,
                footprint: e.rect(),
                center: e.center.unwrap_or_else(Vector3::zeros),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanMode {
    StitchFree,
    StitchRequired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderPlan {
    pub query_image_id: String,
    pub mode: PlanMode,
    pub subscene_ids: Vec<u32>,
    pub query_footprint: FootprintRect,
}

impl RenderPlan {
    pub fn subscene_count(&self) -> usize {
        self.subscene_ids.len()
    }
}

/// Plans a query whose footprint is already known.
///
/// A footprint inside at least one sub-scene footprint is rendered by the
/// containing sub-scene whose center is nearest `query_center` (ties to the
/// lower id). Otherwise every intersecting sub-scene takes part, ordered by
/// descending overlap area, then ascending id.
pub fn plan_footprint(
    query_image_id: &str,
    query_footprint: FootprintRect,
    query_center: &Vector3<f64>,
    index: &[IndexedSubScene],
) -> Result<RenderPlan, RegistrationError> {
    let hits: Vec<&IndexedSubScene> = index
        .iter()
        .filter(|s| s.footprint.intersects(&query_footprint))
        .collect();
    if hits.is_empty() {
        return Err(RegistrationError::OutOfCoverage(query_image_id.to_string()));
    }

    let nearest_container = hits
        .iter()
        .filter(|s| s.footprint.contains(&query_footprint))
        .min_by(|a, b| {
            let da = (a.center - query_center).norm();
            let db = (b.center - query_center).norm();
            da.partial_cmp(&db)
                .unwrap_or(Ordering::Equal)
                .then(a.subscene_id.cmp(&b.subscene_id))
        });

    let (mode, subscene_ids) = match nearest_container {
        Some(s) => (PlanMode::StitchFree, vec![s.subscene_id]),
        None => {
            let mut ranked: Vec<(f64, u32)> = hits
                .iter()
                .map(|s| (s.footprint.intersection_area(&query_footprint), s.subscene_id))
                .collect();
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
            (PlanMode::StitchRequired, ranked.into_iter().map(|(_, id)| id).collect())
        }
    };
    Ok(RenderPlan {
        query_image_id: query_image_id.to_string(),
        mode,
        subscene_ids,
        query_footprint,
    })
}

/// Computes the query footprint and plans it against `index`.
pub fn register_query(
    query_image_id: &str,
    intr: &PinholeIntrinsics,
    pose: &CameraPose,
    plane: &GroundPlane,
    index: &[IndexedSubScene],
) -> Result<RenderPlan, RegistrationError> {
    // camera_footprint only fails when a corner ray misses the plane
    let footprint = camera_footprint(intr, pose, plane)
        .map_err(|_| RegistrationError::Horizon(query_image_id.to_string()))?;
    plan_footprint(query_image_id, footprint, &pose.center, index)
}

/// A novel view to plan and render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCamera {
    pub name: String,
    pub intrinsics: PinholeIntrinsics,
    /// Camera-to-world rotation `(w, x, y, z)`; normalized on use.
    pub quaternion: [f64; 4],
    /// Optical center in world coordinates.
    pub center: [f64; 3],
}

impl QueryCamera {
    pub fn from_pose(name: &str, intrinsics: PinholeIntrinsics, pose: &CameraPose) -> Self {
        Self {
            name: name.to_string(),
            intrinsics,
            quaternion: pose.camera_to_world_qvec(),
            center: pose.center.into(),
        }
    }

    /// `None` for a zero or non-finite quaternion.
    pub fn pose(&self) -> Option<CameraPose> {
        CameraPose::from_camera_to_world(self.quaternion, Vector3::from(self.center))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub schema_version: u32,
    pub queries: Vec<QueryCamera>,
}

impl QuerySet {
    pub fn load(path: &std::path::Path) -> std::io::Result<Self> {
        crate::read_json(path)
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        crate::write_json(path, self)
    }
}

/// A query that could not be planned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnplannedQuery {
    pub query_image_id: String,
    pub reason: String,
}

/// Plans document: one entry per plannable query, in query order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSet {
    pub schema_version: u32,
    pub config_hash: String,
    pub plans: Vec<RenderPlan>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unplanned: Vec<UnplannedQuery>,
}

impl PlanSet {
    pub fn load(path: &std::path::Path) -> std::io::Result<Self> {
        crate::read_json(path)
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        crate::write_json(path, self)
    }
}
