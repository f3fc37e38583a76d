//! Spatial decomposition of a camera set into overlapping sub-scenes.
//!
//! Cameras are clustered by optical center with k-means. Each cluster's
//! radius (largest member distance to the centroid) is scaled by `sigma`,
//! and every camera inside the scaled radius joins that sub-scene. A hard
//! per-sub-scene cap bounds the result; overflow is resolved by dropping the
//! farthest cameras that were not part of the base cluster.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kmeans::{kmeans, ClusterAssignment, KMeansError};
use crate::sparse_io::Reconstruction;
use crate::SCHEMA_VERSION;

pub const DEFAULT_TARGET_PER_SCENE: usize = 90;
pub const DEFAULT_MAX_N: usize = 115;
pub const DEFAULT_SIGMA: f64 = 1.1;

#[derive(Debug, Error)]
pub enum DecompositionError {
    #[error(transparent)]
    KMeans(#[from] KMeansError),
    #[error("cluster {cluster} has {size} cameras, more than max_n = {max_n}")]
    Capacity {
        cluster: usize,
        size: usize,
        max_n: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed partition file: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DecompositionError>;

/// An expanded camera cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubScene {
    pub id: u32,
    pub center: Vector3<f64>,
    pub base_radius: f64,
    pub expanded_radius: f64,
    /// Image ids, ascending.
    pub member_image_ids: Vec<u32>,
}

impl SubScene {
    pub fn contains(&self, image_id: u32) -> bool {
        self.member_image_ids.binary_search(&image_id).is_ok()
    }
}

/// Number of clusters for `total` cameras at `target_per_scene` cameras each.
pub fn choose_k(total: usize, target_per_scene: usize) -> Result<usize> {
    if total == 0 || target_per_scene == 0 {
        return Err(DecompositionError::InvalidParameter(format!(
            "choose_k needs positive inputs, got total={total} target={target_per_scene}"
        )));
    }
    Ok(total.div_ceil(target_per_scene).clamp(1, total))
}

/// Expands each cluster of `assignment` into a sub-scene.
///
/// `positions[i]` is the optical center of the camera with id `image_ids[i]`.
/// Membership uses a closed ball: a camera at exactly `sigma * d_k` joins.
pub fn expand_clusters(
    assignment: &ClusterAssignment,
    positions: &[Vector3<f64>],
    image_ids: &[u32],
    sigma: f64,
    max_n: usize,
) -> Result<Vec<SubScene>> {
    if !(sigma.is_finite() && sigma >= 1.0) {
        return Err(DecompositionError::InvalidParameter(format!(
            "sigma must be >= 1, got {sigma}"
        )));
    }
    if positions.len() != image_ids.len() || positions.len() != assignment.labels.len() {
        return Err(DecompositionError::InvalidParameter(
            "positions, image ids and labels differ in length".into(),
        ));
    }
    let sizes = assignment.cluster_sizes();
    if let Some((cluster, &size)) = sizes.iter().enumerate().find(|(_, &s)| s > max_n) {
        return Err(DecompositionError::Capacity {
            cluster,
            size,
            max_n,
        });
    }

    let mut scenes = Vec::with_capacity(assignment.k());
    for (k, center) in assignment.centers.iter().enumerate() {
        let distances: Vec<f64> = positions.iter().map(|p| (p - center).norm()).collect();
        let base_radius = assignment
            .members(k)
            .map(|i| distances[i])
            .fold(0.0, f64::max);
        let expanded_radius = sigma * base_radius;

        let mut members: Vec<usize> = assignment.members(k).collect();
        let mut foreign: Vec<usize> = (0..positions.len())
            .filter(|&i| assignment.labels[i] != k && distances[i] <= expanded_radius)
            .collect();
        foreign.sort_by(|&a, &b| {
            distances[a]
                .partial_cmp(&distances[b])
                .unwrap_or(Ordering::Equal)
                .then(image_ids[a].cmp(&image_ids[b]))
        });
        foreign.truncate(max_n - members.len());
        members.extend(foreign);

        let mut member_image_ids: Vec<u32> = members.iter().map(|&i| image_ids[i]).collect();
        member_image_ids.sort_unstable();
        scenes.push(SubScene {
            id: k as u32,
            center: *center,
            base_radius,
            expanded_radius,
            member_image_ids,
        });
    }
    Ok(scenes)
}

/// Parameters recorded alongside a partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionConfig {
    pub seed: u64,
    pub sigma: f64,
    pub target_per_scene: usize,
    #[serde(rename = "maxN")]
    pub max_n: usize,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sigma: DEFAULT_SIGMA,
            target_per_scene: DEFAULT_TARGET_PER_SCENE,
            max_n: DEFAULT_MAX_N,
        }
    }
}

impl DecompositionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 1.0) {
            return Err(DecompositionError::InvalidParameter(format!(
                "sigma must be >= 1, got {}",
                self.sigma
            )));
        }
        if self.target_per_scene == 0 {
            return Err(DecompositionError::InvalidParameter(
                "target_per_scene must be >= 1".into(),
            ));
        }
        if self.max_n < self.target_per_scene {
            return Err(DecompositionError::InvalidParameter(format!(
                "maxN ({}) must be >= target_per_scene ({})",
                self.max_n, self.target_per_scene
            )));
        }
        Ok(())
    }
}

/// Partition document written by the decompose stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: DecompositionConfig,
    pub subscenes: Vec<SubScene>,
}

impl Partition {
    pub fn subscene(&self, id: u32) -> Option<&SubScene> {
        self.subscenes.iter().find(|s| s.id == id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_json(path, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Number of cameras that belong to more than one sub-scene.
    pub fn shared_camera_count(&self) -> usize {
        let mut counts = std::collections::BTreeMap::<u32, usize>::new();
        for s in &self.subscenes {
            for &id in &s.member_image_ids {
                *counts.entry(id).or_default() += 1;
            }
        }
        counts.values().filter(|&&c| c > 1).count()
    }
}

/// Runs clustering and expansion over all views of a reconstruction.
pub fn decompose(recon: &Reconstruction, config: &DecompositionConfig, config_hash: &str) -> Result<Partition> {
    config.validate()?;
    let positions = recon.camera_centers();
    let image_ids = recon.image_ids();
    let k = choose_k(positions.len(), config.target_per_scene)?;
    let assignment = kmeans(&positions, k, config.seed)?;
    let subscenes = expand_clusters(&assignment, &positions, &image_ids, config.sigma, config.max_n)?;
    Ok(Partition {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        config: *config,
        subscenes,
    })
}
