//! Lloyd's k-means on 3D points with seeded k-means++ initialization.

use std::collections::HashSet;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum KMeansError {
    #[error("cannot form {k} clusters from {distinct} distinct positions")]
    DegenerateClustering { k: usize, distinct: usize },
    #[error("positions must be finite")]
    NonFinite,
}

/// Cluster label per input point plus the cluster centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centers: Vec<Vector3<f64>>,
    pub iterations: usize,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == cluster)
            .map(|(i, _)| i)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn distinct_count(positions: &[Vector3<f64>]) -> usize {
    // +0.0 normalizes negative zero so -0.0 and 0.0 count as one position.
    positions
        .iter()
        .map(|p| [(p.x + 0.0).to_bits(), (p.y + 0.0).to_bits(), (p.z + 0.0).to_bits()])
        .collect::<HashSet<_>>()
        .len()
}

/// Index of the nearest center; ties go to the lowest index.
pub fn nearest_center(p: &Vector3<f64>, centers: &[Vector3<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn kmeans_plus_plus(positions: &[Vector3<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let n = positions.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(positions[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = positions
        .iter()
        .map(|p| (p - centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        // total > 0 while fewer centers than distinct positions have been chosen
        let mut target = rng.random::<f64>() * total;
        let mut chosen = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            chosen = Some(i);
            if target < w {
                break;
            }
            target -= w;
        }
        let c = positions[chosen.expect("some point lies away from all chosen centers")];
        for (p, d) in positions.iter().zip(d2.iter_mut()) {
            *d = d.min((p - c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

/// Clusters `positions` into `k` groups.
///
/// Converges when no label changes or after [`MAX_ITERATIONS`] rounds. A
/// cluster that empties during iteration is re-seeded with the point
/// farthest from its own center, taken from a cluster with more than one
/// member, so every returned cluster is non-empty.
pub fn kmeans(positions: &[Vector3<f64>], k: usize, seed: u64) -> Result<ClusterAssignment, KMeansError> {
    if positions.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(KMeansError::NonFinite);
    }
    let distinct = distinct_count(positions);
    if k == 0 || k > distinct {
        return Err(KMeansError::DegenerateClustering { k, distinct });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_plus_plus(positions, k, &mut rng);
    let mut labels: Vec<usize> = positions.iter().map(|p| nearest_center(p, &centers)).collect();
    let mut iterations = 0;

    loop {
        iterations += 1;
        fill_empty_clusters(positions, &mut labels, &centers, k);
        centers = means(positions, &labels, k);
        let next: Vec<usize> = positions.iter().map(|p| nearest_center(p, &centers)).collect();
        let changed = next != labels;
        labels = next;
        if !changed || iterations >= MAX_ITERATIONS {
            break;
        }
    }
    if fill_empty_clusters(positions, &mut labels, &centers, k) {
        centers = means(positions, &labels, k);
    }

    Ok(ClusterAssignment {
        labels,
        centers,
        iterations,
    })
}

fn means(positions: &[Vector3<f64>], labels: &[usize], k: usize) -> Vec<Vector3<f64>> {
    let mut sums = vec![Vector3::zeros(); k];
    let mut counts = vec![0usize; k];
    for (p, &l) in positions.iter().zip(labels) {
        sums[l] += p;
        counts[l] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| s / c as f64)
        .collect()
}

/// Returns true if any label was moved.
fn fill_empty_clusters(
    positions: &[Vector3<f64>],
    labels: &mut [usize],
    centers: &[Vector3<f64>],
    k: usize,
) -> bool {
    let mut moved = false;
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return moved;
        };
        let donor = (0..positions.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                let da = (positions[a] - centers[labels[a]]).norm_squared();
                let db = (positions[b] - centers[labels[b]]).norm_squared();
                // strict ordering with lowest index winning ties
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k <= n guarantees a cluster with spare members");
        labels[donor] = empty;
        moved = true;
    }
}
