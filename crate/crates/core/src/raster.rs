//! 8-bit RGB rasters and their floating-point working copies.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("buffer length {len} does not match {width}x{height}x3")]
    BufferSize { width: u32, height: u32, len: usize },
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Row-major interleaved RGB, 8 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, RasterError> {
        if data.len() != width as usize * height as usize * 3 {
            return Err(RasterError::BufferSize {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn same_size(&self, other: &Self) -> Result<(), RasterError> {
        if self.width != other.width || self.height != other.height {
            return Err(RasterError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// ITU-R BT.601 luma per pixel, in [0, 255].
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| luma601(f64::from(p[0]), f64::from(p[1]), f64::from(p[2])))
            .collect()
    }

    pub fn to_float(&self) -> FloatImage {
        FloatImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f32::from(v)).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(image::ImageError::IoError)?;
        }
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        let img = image::open(path)?.into_rgb8();
        let (width, height) = img.dimensions();
        Ok(Self {
            width,
            height,
            data: img.into_raw(),
        })
    }
}

pub fn luma601(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Floating-point RGB image on the 0..255 scale, unclamped.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width as usize * height as usize * 3],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Rounds to nearest and clamps into 8 bits.
    pub fn quantize(&self) -> RasterImage {
        RasterImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| quantize_channel(v)).collect(),
        }
    }
}

/// Separable Gaussian blur with edge-replicated borders; `sigma <= 0` copies.
pub fn gaussian_blur(image: &FloatImage, sigma: f64) -> FloatImage {
    if sigma.is_nan() || sigma <= 0.0 || image.data.is_empty() {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);

    let (w, h) = (image.width as isize, image.height as isize);
    let idx = |x: isize, y: isize, c: usize| ((y * w + x) as usize) * 3 + c;
    let mut tmp = vec![0.0f32; image.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let sx = (x + i as isize - radius).clamp(0, w - 1);
                        k * f64::from(image.data[idx(sx, y, c)])
                    })
                    .sum();
                tmp[idx(x, y, c)] = acc as f32;
            }
        }
    }
    let mut out = vec![0.0f32; image.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let sy = (y + i as isize - radius).clamp(0, h - 1);
                        k * f64::from(tmp[idx(x, sy, c)])
                    })
                    .sum();
                out[idx(x, y, c)] = acc as f32;
            }
        }
    }
    FloatImage {
        width: image.width,
        height: image.height,
        data: out,
    }
}

pub fn quantize_channel(v: f32) -> u8 {
    if v.is_nan() {
        0
    } else {
        v.round().clamp(0.0, 255.0) as u8
    }
}
