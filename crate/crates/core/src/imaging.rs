//! Grayscale image grids and their 8-bit PNG encoding.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};

/// Row-major single-channel image with intensities in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("grid data", width * height, data.len()));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// 8-bit encoding: `round((v + 1) · 127.5)`, clamped to [0, 255].
    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([signed_to_u8(self.get(x as usize, y as usize))])
        })
    }

    /// Inverse of [`Grid::to_gray8`]: `v / 127.5 − 1`.
    pub fn from_gray8(img: &GrayImage) -> Self {
        Grid {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| u8_to_signed(p.0[0])).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_gray(&self.to_gray8(), path)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Ok(Self::from_gray8(&load_gray(path)?))
    }
}

pub fn signed_to_u8(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn u8_to_signed(v: u8) -> f32 {
    (v as f64 / 127.5 - 1.0) as f32
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// Loads any supported image and converts it to 8-bit luminance.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(load_dynamic(path)?.to_luma8())
}

pub fn load_dynamic(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| image_error(path, e))
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}
