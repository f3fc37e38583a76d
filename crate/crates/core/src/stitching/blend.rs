//! Feathered and multi-band (Laplacian pyramid) blending of aligned renders.

use super::{check_dimensions, CompositeInput, StitchError};
use crate::raster::FloatImage;

/// Width of the linear feather ramp, in pixels.
pub const FEATHER_WIDTH: f64 = 16.0;
pub const DEFAULT_BANDS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct BlendOutput {
    pub image: FloatImage,
    /// Pixels no input trusted, filled from the dominant input.
    pub hole_pixels: usize,
}

/// Exact squared Euclidean distance transform (Felzenszwalb–Huttenlocher)
/// of `feature`: for each pixel, squared distance to the nearest `true`
/// pixel, or infinity if there is none.
pub fn squared_distance_transform(feature: &[bool], width: usize, height: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = feature
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let mut line = vec![0.0; width.max(height)];
    let mut out = vec![0.0; width.max(height)];
    for x in 0..width {
        for y in 0..height {
            line[y] = grid[y * width + x];
        }
        dt_1d(&line[..height], &mut out[..height]);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        line[..width].copy_from_slice(row);
        dt_1d(&line[..width], &mut out[..width]);
        row.copy_from_slice(&out[..width]);
    }
    grid
}

fn dt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        d.iter_mut().for_each(|v| *v = f64::INFINITY);
        return;
    }
    // lower envelope of parabolas rooted at finite samples
    let mut v = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    for &q in &finite {
        let qf = q as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let pf = p as f64;
                    let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let p = v[k];
        *out = (qf - p as f64).powi(2) + f[p];
    }
}

/// Unnormalized feather weight per input and pixel: the keep mask times a
/// ramp that rises linearly over [`FEATHER_WIDTH`] pixels away from the
/// nearest untrusted pixel.
pub fn feather_weights(inputs: &[CompositeInput]) -> Vec<Vec<f64>> {
    inputs
        .iter()
        .map(|input| {
            let (w, h) = (input.image.width as usize, input.image.height as usize);
            let untrusted: Vec<bool> = input.keep_mask.iter().map(|&k| k <= 0.0).collect();
            let dist2 = squared_distance_transform(&untrusted, w, h);
            input
                .keep_mask
                .iter()
                .zip(dist2)
                .map(|(&k, d2)| {
                    if k <= 0.0 {
                        0.0
                    } else {
                        f64::from(k) * (d2.sqrt().min(FEATHER_WIDTH) / FEATHER_WIDTH)
                    }
                })
                .collect()
        })
        .collect()
}

/// Per-pixel weights normalized to sum to one; all zero at hole pixels.
pub fn normalized_feather_weights(inputs: &[CompositeInput]) -> Vec<Vec<f64>> {
    let mut weights = feather_weights(inputs);
    let pixels = weights.first().map_or(0, Vec::len);
    for p in 0..pixels {
        let total: f64 = weights.iter().map(|w| w[p]).sum();
        if total > 0.0 {
            weights.iter_mut().for_each(|w| w[p] /= total);
        }
    }
    weights
}

/// Input with the largest total weight; ties go to the earliest input.
fn dominant_input(weights: &[Vec<f64>]) -> usize {
    let totals: Vec<f64> = weights.iter().map(|w| w.iter().sum()).collect();
    let mut best = 0;
    for (i, &t) in totals.iter().enumerate() {
        if t > totals[best] {
            best = i;
        }
    }
    best
}

fn fill_holes(out: &mut FloatImage, inputs: &[CompositeInput], weights: &[Vec<f64>]) -> usize {
    let dominant = dominant_input(weights);
    let mut holes = 0;
    for p in 0..out.pixel_count() {
        if weights.iter().all(|w| w[p] <= 0.0) {
            holes += 1;
            out.data[3 * p..3 * p + 3].copy_from_slice(&inputs[dominant].image.data[3 * p..3 * p + 3]);
        }
    }
    holes
}

pub fn feather_blend(inputs: &[CompositeInput]) -> Result<BlendOutput, StitchError> {
    if inputs.is_empty() {
        return Err(StitchError::Validation("nothing to blend".into()));
    }
    check_dimensions(inputs)?;
    let weights = feather_weights(inputs);
    let first = &inputs[0].image;
    let mut out = FloatImage::zeros(first.width, first.height);
    for p in 0..out.pixel_count() {
        let total: f64 = weights.iter().map(|w| w[p]).sum();
        if total <= 0.0 {
            continue;
        }
        for c in 0..3 {
            let acc: f64 = inputs
                .iter()
                .zip(&weights)
                .map(|(input, w)| w[p] * f64::from(input.image.data[3 * p + c]))
                .sum();
            out.data[3 * p + c] = (acc / total) as f32;
        }
    }
    let hole_pixels = fill_holes(&mut out, inputs, &weights);
    Ok(BlendOutput {
        image: out,
        hole_pixels,
    })
}

/// Single-channel float plane used for pyramids.
#[derive(Debug, Clone)]
struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

const KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

impl Plane {
    fn at(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Edge-replicating pad to `width` x `height`.
    fn padded(&self, width: usize, height: usize) -> Plane {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(self.at(x as isize, y as isize));
            }
        }
        Plane { width, height, data }
    }

    /// Binomial blur then 2x decimation.
    fn reduce(&self) -> Plane {
        let (w, h) = (self.width.div_ceil(2), self.height.div_ceil(2));
        let mut tmp = vec![0.0; w * self.height];
        for y in 0..self.height {
            for x in 0..w {
                tmp[y * w + x] = KERNEL
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * self.at(2 * x as isize + k as isize - 2, y as isize))
                    .sum();
            }
        }
        let tmp = Plane {
            width: w,
            height: self.height,
            data: tmp,
        };
        let mut data = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = KERNEL
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp.at(x as isize, 2 * y as isize + k as isize - 2))
                    .sum();
            }
        }
        Plane { width: w, height: h, data }
    }

    /// 2x upsampling to `width` x `height` with the binomial interpolation kernel.
    fn expand(&self, width: usize, height: usize) -> Plane {
        let taps = |pos: usize| -> Vec<(isize, f64)> {
            // output sample `pos` draws from source samples (pos - m) / 2 for even pos - m
            (-2isize..=2)
                .filter(|m| (pos as isize - m).rem_euclid(2) == 0)
                .map(|m| ((pos as isize - m) / 2, 2.0 * KERNEL[(m + 2) as usize]))
                .collect()
        };
        let mut tmp = vec![0.0; width * self.height];
        for x in 0..width {
            let tx = taps(x);
            for y in 0..self.height {
                tmp[y * width + x] = tx.iter().map(|&(sx, k)| k * self.at(sx, y as isize)).sum();
            }
        }
        let tmp = Plane {
            width,
            height: self.height,
            data: tmp,
        };
        let mut data = vec![0.0; width * height];
        for y in 0..height {
            let ty = taps(y);
            for x in 0..width {
                data[y * width + x] = ty.iter().map(|&(sy, k)| k * tmp.at(x as isize, sy)).sum();
            }
        }
        Plane { width, height, data }
    }
}

fn gaussian_pyramid(base: Plane, levels: usize) -> Vec<Plane> {
    let mut pyr = vec![base];
    for _ in 1..levels {
        let next = pyr.last().unwrap().reduce();
        pyr.push(next);
    }
    pyr
}

fn laplacian_pyramid(base: Plane, levels: usize) -> Vec<Plane> {
    let gauss = gaussian_pyramid(base, levels);
    let mut lap = Vec::with_capacity(levels);
    for k in 0..levels - 1 {
        let up = gauss[k + 1].expand(gauss[k].width, gauss[k].height);
        let data = gauss[k].data.iter().zip(&up.data).map(|(a, b)| a - b).collect();
        lap.push(Plane {
            width: gauss[k].width,
            height: gauss[k].height,
            data,
        });
    }
    lap.push(gauss[levels - 1].clone());
    lap
}

fn collapse(mut levels: Vec<Plane>) -> Plane {
    let mut acc = levels.pop().expect("at least one level");
    while let Some(mut level) = levels.pop() {
        let up = acc.expand(level.width, level.height);
        level.data.iter_mut().zip(&up.data).for_each(|(l, u)| *l += u);
        acc = level;
    }
    acc
}

/// Laplacian-pyramid blend with `bands` levels. Weight pyramids are
/// Gaussian pyramids of the feather weights, so `bands = 1` is exactly
/// [`feather_blend`].
pub fn multiband_blend(inputs: &[CompositeInput], bands: usize) -> Result<BlendOutput, StitchError> {
    if bands == 0 {
        return Err(StitchError::Validation("bands must be >= 1".into()));
    }
    if inputs.is_empty() {
        return Err(StitchError::Validation("nothing to blend".into()));
    }
    check_dimensions(inputs)?;
    let (w, h) = (inputs[0].image.width as usize, inputs[0].image.height as usize);
    // cap the depth so the coarsest level keeps at least one pixel per 2^k block
    let levels = bands.min(usize::BITS as usize - w.max(h).leading_zeros() as usize).max(1);
    let block = 1usize << (levels - 1);
    let (pw, ph) = (w.div_ceil(block) * block, h.div_ceil(block) * block);

    let weights = feather_weights(inputs);
    let weight_pyrs: Vec<Vec<Plane>> = weights
        .iter()
        .map(|wt| {
            let plane = Plane {
                width: w,
                height: h,
                data: wt.clone(),
            };
            gaussian_pyramid(plane.padded(pw, ph), levels)
        })
        .collect();

    let mut out = FloatImage::zeros(w as u32, h as u32);
    for c in 0..3 {
        let lap_pyrs: Vec<Vec<Plane>> = inputs
            .iter()
            .map(|input| {
                let plane = Plane {
                    width: w,
                    height: h,
                    data: input.image.data.iter().skip(c).step_by(3).map(|&v| f64::from(v)).collect(),
                };
                laplacian_pyramid(plane.padded(pw, ph), levels)
            })
            .collect();
        let mut blended = Vec::with_capacity(levels);
        for k in 0..levels {
            let size = lap_pyrs[0][k].data.len();
            let mut data = vec![0.0; size];
            for (p, value) in data.iter_mut().enumerate() {
                let total: f64 = weight_pyrs.iter().map(|wp| wp[k].data[p]).sum();
                *value = if total > 0.0 {
                    lap_pyrs
                        .iter()
                        .zip(&weight_pyrs)
                        .map(|(lp, wp)| wp[k].data[p] * lp[k].data[p])
                        .sum::<f64>()
                        / total
                } else {
                    lap_pyrs.iter().map(|lp| lp[k].data[p]).sum::<f64>() / inputs.len() as f64
                };
            }
            blended.push(Plane {
                width: lap_pyrs[0][k].width,
                height: lap_pyrs[0][k].height,
                data,
            });
        }
        let result = collapse(blended);
        for y in 0..h {
            for x in 0..w {
                out.data[3 * (y * w + x) + c] = result.data[y * pw + x] as f32;
            }
        }
    }
    let hole_pixels = fill_holes(&mut out, inputs, &weights);
    Ok(BlendOutput {
        image: out,
        hole_pixels,
    })
}
