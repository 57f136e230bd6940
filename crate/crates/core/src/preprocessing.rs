//! Image conditioning: grayscale → Gaussian blur → bilinear resize → crop →
//! normalization onto [-1, 1].
//!
//! Every stage before normalization works on 8-bit-scale intensities in
//! [0, 255]; the stage outputs are available for inspection through
//! [`preprocess_stages`].

use std::path::Path;

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_indices, ImagePair, Manifest, ManifestEntry, Modality, Split};
use crate::error::{Error, Result};
use crate::gmi::BinaryMask;
use crate::imaging::{load_dynamic, load_gray, Grid};
use crate::parallel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub gaussian_sigma: f64,
    pub intermediate_size: usize,
    pub crop_size: usize,
    pub test_fraction: f64,
    /// Modality used as domain A.
    pub domain_a: Modality,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            gaussian_sigma: 1.0,
            intermediate_size: 128,
            crop_size: 64,
            test_fraction: 0.1,
            domain_a: Modality::Membrane,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma.is_finite() && self.gaussian_sigma >= 0.0) {
            return Err(Error::validation(
                "gaussian_sigma",
                "must be finite and non-negative",
            ));
        }
        if self.crop_size == 0 || self.crop_size > self.intermediate_size {
            return Err(Error::validation(
                "crop_size",
                format!(
                    "{} must be in 1..={}",
                    self.crop_size, self.intermediate_size
                ),
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::validation(
                "test_fraction",
                format!("{} not in (0, 1)", self.test_fraction),
            ));
        }
        Ok(())
    }
}

/// Intensity plane on the 8-bit scale, before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Grayscale,
    Blur,
    Resize,
    Crop,
}

/// ITU-R 601 luma of an 8-bit image; gray inputs pass through unchanged.
pub fn grayscale(raw: &DynamicImage) -> Result<Plane> {
    let (w, h) = (raw.width() as usize, raw.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::validation("image", "empty"));
    }
    let data = match raw {
        DynamicImage::ImageLuma8(g) => g.pixels().map(|p| p.0[0] as f64).collect(),
        DynamicImage::ImageLumaA8(g) => g.pixels().map(|p| p.0[0] as f64).collect(),
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => raw
            .to_rgb8()
            .pixels()
            .map(|p| 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
            .collect(),
        _ => {
            return Err(Error::validation(
                "image",
                format!(
                    "{:?} is not 8-bit; only 8-bit gray or RGB input is accepted",
                    raw.color()
                ),
            ))
        }
    };
    Ok(Plane {
        width: w,
        height: h,
        data,
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge clamping; `sigma = 0` is the identity.
pub fn gaussian_blur(p: &Plane, sigma: f64) -> Plane {
    if sigma == 0.0 {
        return p.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = (p.width as isize, p.height as isize);
    let mut tmp = vec![0.0; p.data.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[(y * w + x) as usize] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * p.at((x + i as isize - r).clamp(0, w - 1) as usize, y as usize))
                .sum();
        }
    }
    let mut out = vec![0.0; p.data.len()];
    for y in 0..h {
        for x in 0..w {
            out[(y * w + x) as usize] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[((y + i as isize - r).clamp(0, h - 1) * w + x) as usize])
                .sum();
        }
    }
    Plane {
        width: p.width,
        height: p.height,
        data: out,
    }
}

/// Bilinear resampling with pixel-centre alignment and clamped borders.
pub fn resize_bilinear(p: &Plane, width: usize, height: usize) -> Plane {
    let sx = p.width as f64 / width as f64;
    let sy = p.height as f64 / height as f64;
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (p.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(p.height - 1);
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (p.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(p.width - 1);
            let tx = fx - x0 as f64;
            let top = p.at(x0, y0) * (1.0 - tx) + p.at(x1, y0) * tx;
            let bottom = p.at(x0, y1) * (1.0 - tx) + p.at(x1, y1) * tx;
            data.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    Plane {
        width,
        height,
        data,
    }
}

/// `size × size` window whose top-left corner is `center − size/2`.
pub fn crop(p: &Plane, center: (usize, usize), size: usize) -> Result<Plane> {
    let (cx, cy) = (center.0 as isize, center.1 as isize);
    let (x0, y0) = (cx - (size / 2) as isize, cy - (size / 2) as isize);
    let (x1, y1) = (x0 + size as isize, y0 + size as isize);
    if x0 < 0 || y0 < 0 || x1 > p.width as isize || y1 > p.height as isize {
        return Err(Error::validation(
            "crop_center",
            format!(
                "window x {x0}..{x1}, y {y0}..{y1} around ({cx}, {cy}) exceeds the {}x{} image",
                p.width, p.height
            ),
        ));
    }
    let mut data = Vec::with_capacity(size * size);
    for y in y0 as usize..y1 as usize {
        data.extend_from_slice(&p.data[y * p.width + x0 as usize..y * p.width + x1 as usize]);
    }
    Ok(Plane {
        width: size,
        height: size,
        data,
    })
}

/// `v / 127.5 − 1`. The input must be on the 8-bit scale; a plane that
/// already holds negative values has been normalized before and is rejected.
pub fn normalize(p: &Plane) -> Result<Grid> {
    const SLACK: f64 = 1e-6;
    if let Some(v) = p
        .data
        .iter()
        .find(|v| !(v.is_finite() && (-SLACK..=255.0 + SLACK).contains(*v)))
    {
        return Err(Error::validation(
            "image",
            format!("value {v} outside the 8-bit range [0, 255]; input may already be normalized"),
        ));
    }
    Grid::new(
        p.width,
        p.height,
        p.data
            .iter()
            .map(|v| (v.clamp(0.0, 255.0) / 127.5 - 1.0) as f32)
            .collect(),
    )
}

/// Runs the chain and returns each intermediate plane alongside the result.
pub fn preprocess_stages(
    raw: &DynamicImage,
    cfg: &PreprocessConfig,
    crop_center: Option<(usize, usize)>,
) -> Result<(Vec<(Stage, Plane)>, Grid)> {
    cfg.validate()?;
    let gray = grayscale(raw)?;
    let blurred = gaussian_blur(&gray, cfg.gaussian_sigma);
    let n = cfg.intermediate_size;
    let resized = resize_bilinear(&blurred, n, n);
    let center = crop_center.unwrap_or((n / 2, n / 2));
    let cropped = crop(&resized, center, cfg.crop_size)?;
    let out = normalize(&cropped)?;
    Ok((
        vec![
            (Stage::Grayscale, gray),
            (Stage::Blur, blurred),
            (Stage::Resize, resized),
            (Stage::Crop, cropped),
        ],
        out,
    ))
}

/// Full conditioning chain; `crop_center` defaults to the centre of the resized image.
pub fn preprocess_image(
    raw: &DynamicImage,
    cfg: &PreprocessConfig,
    crop_center: Option<(usize, usize)>,
) -> Result<Grid> {
    preprocess_stages(raw, cfg, crop_center).map(|(_, g)| g)
}

/// Masks follow the geometric part of the chain (resize by nearest neighbour
/// and crop) so they stay aligned with the conditioned images.
pub fn preprocess_mask(
    mask: &BinaryMask,
    cfg: &PreprocessConfig,
    crop_center: Option<(usize, usize)>,
) -> Result<BinaryMask> {
    let (w, h) = mask.dims();
    let n = cfg.intermediate_size;
    let center = crop_center.unwrap_or((n / 2, n / 2));
    let resized = Plane {
        width: n,
        height: n,
        data: (0..n * n)
            .map(|i| {
                let (x, y) = (i % n, i / n);
                let sx = ((x * w) / n).min(w - 1);
                let sy = ((y * h) / n).min(h - 1);
                if mask.get(sx, sy) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
    };
    let c = crop(&resized, center, cfg.crop_size)?;
    BinaryMask::new(c.width, c.height, c.data.iter().map(|&v| v > 0.5).collect())
}

fn load_entry(
    manifest: &Manifest,
    e: &ManifestEntry,
    cfg: &PreprocessConfig,
    split: Split,
) -> Result<ImagePair> {
    let missing = |p: &Path, err: Error| match err {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            Error::validation(
                format!("pair {}", e.pair_id),
                format!("missing file {}", p.display()),
            )
        }
        other => other,
    };
    let load = |rel: &Path| {
        let p = manifest.resolve(rel);
        load_dynamic(&p).map_err(|err| missing(&p, err))
    };
    let m_raw = load(&e.membrane)?;
    let n_raw = load(&e.nuclei)?;
    if m_raw.width() != n_raw.width() || m_raw.height() != n_raw.height() {
        return Err(Error::validation(
            format!("pair {}", e.pair_id),
            format!(
                "membrane is {}x{} but nuclei is {}x{}",
                m_raw.width(),
                m_raw.height(),
                n_raw.width(),
                n_raw.height()
            ),
        ));
    }
    let membrane = preprocess_image(&m_raw, cfg, None)?;
    let nuclei = preprocess_image(&n_raw, cfg, None)?;
    let mask = |rel: &Option<std::path::PathBuf>| -> Result<Option<BinaryMask>> {
        rel.as_ref()
            .map(|r| {
                let p = manifest.resolve(r);
                let m = BinaryMask::from_gray8(&load_gray(&p).map_err(|err| missing(&p, err))?);
                preprocess_mask(&m, cfg, None)
            })
            .transpose()
    };
    let (mm, nm) = (mask(&e.membrane_mask)?, mask(&e.nuclei_mask)?);
    let (a, b, mask_a, mask_b) = match cfg.domain_a {
        Modality::Membrane => (membrane, nuclei, mm, nm),
        Modality::Nuclei => (nuclei, membrane, nm, mm),
    };
    Ok(ImagePair {
        id: e.pair_id.clone(),
        split,
        a,
        b,
        mask_a,
        mask_b,
    })
}

/// Loads and conditions every manifest pair, then splits them by a seeded
/// `floor(n · test_fraction)` rule. Both images of a pair always share a side.
pub fn build_splits(
    manifest: &Manifest,
    cfg: &PreprocessConfig,
    seed: u64,
) -> Result<(Vec<ImagePair>, Vec<ImagePair>)> {
    cfg.validate()?;
    if manifest.entries.is_empty() {
        return Err(Error::validation("manifest", "no pairs"));
    }
    let splits = split_indices(manifest.entries.len(), cfg.test_fraction, seed);
    let pairs = parallel::map_indexed(manifest.entries.len(), |i| {
        load_entry(manifest, &manifest.entries[i], cfg, splits[i])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().partition(|p| p.split == Split::Train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, RgbImage};

    fn gray(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> DynamicImage {
        DynamicImage::ImageLuma8(GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)])))
    }

    #[test]
    fn constant_endpoints() {
        let cfg = PreprocessConfig::default();
        let hi = preprocess_image(&gray(200, 150, |_, _| 255), &cfg, None).unwrap();
        assert_eq!(hi.dims(), (64, 64));
        assert!(hi.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let lo = preprocess_image(&gray(200, 150, |_, _| 0), &cfg, None).unwrap();
        assert!(lo.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn rgb_uses_luma_weights() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(4, 4, image::Rgb([255, 0, 0])));
        let p = grayscale(&img).unwrap();
        assert!(p.data.iter().all(|v| (v - 0.299 * 255.0).abs() < 1e-9));
    }

    #[test]
    fn crop_out_of_bounds_reports_coordinates() {
        let cfg = PreprocessConfig::default();
        let err = preprocess_image(&gray(64, 64, |_, _| 9), &cfg, Some((10, 64))).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(10, 64)"), "{msg}");
    }

    #[test]
    fn already_normalized_plane_rejected() {
        let p = Plane {
            width: 2,
            height: 1,
            data: vec![-0.5, 0.5],
        };
        assert!(matches!(normalize(&p), Err(Error::Validation { .. })));
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let p = Plane {
            width: 3,
            height: 2,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        assert_eq!(resize_bilinear(&p, 3, 2), p);
    }

    #[test]
    fn stages_in_order() {
        let (stages, _) = preprocess_stages(
            &gray(100, 100, |x, _| (x * 2) as u8),
            &PreprocessConfig::default(),
            None,
        )
        .unwrap();
        let kinds: Vec<Stage> = stages.iter().map(|s| s.0).collect();
        assert_eq!(
            kinds,
            vec![Stage::Grayscale, Stage::Blur, Stage::Resize, Stage::Crop]
        );
        assert_eq!((stages[2].1.width, stages[3].1.width), (128, 64));
    }
}
