//! Per-image gain compensation over trusted overlaps.
//!
//! For every pair of inputs the mean intensity of each image over the pixels
//! both trust is compared. Gains minimize
//!
//! ```text
//! Σ_{i<j} w_ij (g_i·a_ij − g_j·a_ji)² + λ Σ_i (g_i − 1)²
//! ```
//!
//! where `a_ij` is image i's overlap mean divided by the mean overlap
//! intensity over all pairs, `w_ij` is the pair's share of all overlap
//! pixels and `λ = 0.01`. Normalizing both terms this way makes the relative
//! gains independent of a global intensity scale. The solution is rescaled
//! so the first input has gain 1.

use nalgebra::{DMatrix, DVector};

use super::{CompositeInput, StitchError};

pub const GAIN_REGULARIZATION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct GainResult {
    pub gains: Vec<f64>,
    /// False when no two inputs share a trusted pixel; gains are then all 1.
    pub overlap_found: bool,
}

struct PairStats {
    i: usize,
    j: usize,
    count: usize,
    mean_i: f64,
    mean_j: f64,
}

fn pair_stats(a: &CompositeInput, b: &CompositeInput) -> (usize, f64, f64) {
    let mut count = 0usize;
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    let pa = a.image.data.chunks_exact(3);
    let pb = b.image.data.chunks_exact(3);
    for (((ka, kb), ca), cb) in a.keep_mask.iter().zip(&b.keep_mask).zip(pa).zip(pb) {
        if *ka > 0.0 && *kb > 0.0 {
            count += 1;
            sum_a += ca.iter().map(|&v| f64::from(v)).sum::<f64>() / 3.0;
            sum_b += cb.iter().map(|&v| f64::from(v)).sum::<f64>() / 3.0;
        }
    }
    if count == 0 {
        (0, 0.0, 0.0)
    } else {
        (count, sum_a / count as f64, sum_b / count as f64)
    }
}

pub fn gain_compensate(inputs: &[CompositeInput]) -> Result<GainResult, StitchError> {
    if inputs.is_empty() {
        return Err(StitchError::Validation("gain compensation needs at least one input".into()));
    }
    super::check_dimensions(inputs)?;
    let n = inputs.len();
    let unit = GainResult {
        gains: vec![1.0; n],
        overlap_found: false,
    };

    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (count, mean_i, mean_j) = pair_stats(&inputs[i], &inputs[j]);
            if count > 0 {
                pairs.push(PairStats {
                    i,
                    j,
                    count,
                    mean_i,
                    mean_j,
                });
            }
        }
    }
    let total: usize = pairs.iter().map(|p| p.count).sum();
    if total == 0 {
        return Ok(unit);
    }
    let scale = pairs
        .iter()
        .map(|p| p.count as f64 * (p.mean_i + p.mean_j))
        .sum::<f64>()
        / (2.0 * total as f64);
    if scale.is_nan() || scale <= 0.0 {
        // all overlaps black: nothing to equalize
        return Ok(GainResult {
            overlap_found: true,
            ..unit
        });
    }

    let mut h = DMatrix::<f64>::identity(n, n) * GAIN_REGULARIZATION;
    let rhs = DVector::<f64>::from_element(n, GAIN_REGULARIZATION);
    for p in &pairs {
        let w = p.count as f64 / total as f64;
        let ai = p.mean_i / scale;
        let aj = p.mean_j / scale;
        h[(p.i, p.i)] += w * ai * ai;
        h[(p.j, p.j)] += w * aj * aj;
        h[(p.i, p.j)] -= w * ai * aj;
        h[(p.j, p.i)] -= w * ai * aj;
    }
    let g = h
        .cholesky()
        .ok_or_else(|| StitchError::Validation("gain system is not positive definite".into()))?
        .solve(&rhs);
    let reference = g[0];
    Ok(GainResult {
        gains: g.iter().map(|v| v / reference).collect(),
        overlap_found: true,
    })
}
