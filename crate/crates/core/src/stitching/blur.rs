//! Tile-wise blur detection by variance of the Laplacian.

use serde::{Deserialize, Serialize};

use super::StitchError;
use crate::raster::RasterImage;

pub const DEFAULT_TILE_SIZE: u32 = 32;
pub const DEFAULT_BLUR_THRESHOLD: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlurConfig {
    pub tile: u32,
    pub threshold: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self {
            tile: DEFAULT_TILE_SIZE,
            threshold: DEFAULT_BLUR_THRESHOLD,
        }
    }
}

/// Per-tile blur flags over an image.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurMask {
    pub tile_size: u32,
    pub width: u32,
    pub height: u32,
    pub tiles_x: u32,
    pub tiles_y: u32,
    /// Row-major, `true` = blurred.
    pub grid: Vec<bool>,
    /// Laplacian variance per tile, same layout as `grid`.
    pub variances: Vec<f64>,
}

impl BlurMask {
    pub fn tile_blurred(&self, tx: u32, ty: u32) -> bool {
        self.grid[(ty * self.tiles_x + tx) as usize]
    }

    pub fn is_blurred(&self, x: u32, y: u32) -> bool {
        self.tile_blurred(x / self.tile_size, y / self.tile_size)
    }

    /// Per-pixel keep weights: 1 where the tile is sharp, 0 where blurred.
    pub fn keep_mask(&self) -> Vec<f32> {
        let mut mask = Vec::with_capacity(self.width as usize * self.height as usize);
        for y in 0..self.height {
            for x in 0..self.width {
                mask.push(if self.is_blurred(x, y) { 0.0 } else { 1.0 });
            }
        }
        mask
    }

    pub fn blurred_fraction(&self) -> f64 {
        self.grid.iter().filter(|&&b| b).count() as f64 / self.grid.len() as f64
    }
}

/// 4-neighbour Laplacian of `luma` with edge-replicated borders.
pub fn laplacian(luma: &[f64], width: u32, height: u32) -> Vec<f64> {
    let (w, h) = (width as usize, height as usize);
    let at = |x: usize, y: usize| luma[y * w + x];
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let up = y.saturating_sub(1);
        let down = (y + 1).min(h - 1);
        for x in 0..w {
            let left = x.saturating_sub(1);
            let right = (x + 1).min(w - 1);
            out[y * w + x] = at(x, up) + at(x, down) + at(left, y) + at(right, y) - 4.0 * at(x, y);
        }
    }
    out
}

/// Marks each `tile_size` square tile as blurred when the variance of the
/// Laplacian of its luma falls below `threshold`. Edge tiles may be smaller;
/// an image smaller than one tile is a single tile.
pub fn detect_blur(image: &RasterImage, tile_size: u32, threshold: f64) -> Result<BlurMask, StitchError> {
    if tile_size < 4 {
        return Err(StitchError::Validation(format!("tile size must be >= 4, got {tile_size}")));
    }
    if image.width == 0 || image.height == 0 {
        return Err(StitchError::Validation("empty image".into()));
    }
    let lap = laplacian(&image.luma(), image.width, image.height);
    let tiles_x = image.width.div_ceil(tile_size);
    let tiles_y = image.height.div_ceil(tile_size);
    let mut grid = Vec::with_capacity((tiles_x * tiles_y) as usize);
    let mut variances = Vec::with_capacity(grid.capacity());
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let x0 = tx * tile_size;
            let y0 = ty * tile_size;
            let x1 = (x0 + tile_size).min(image.width);
            let y1 = (y0 + tile_size).min(image.height);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for y in y0..y1 {
                let row = &lap[(y * image.width) as usize..][x0 as usize..x1 as usize];
                for &v in row {
                    sum += v;
                    sum_sq += v * v;
                }
            }
            let n = f64::from((x1 - x0) * (y1 - y0));
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0);
            variances.push(var);
            grid.push(var < threshold);
        }
    }
    Ok(BlurMask {
        tile_size,
        width: image.width,
        height: image.height,
        tiles_x,
        tiles_y,
        grid,
        variances,
    })
}
