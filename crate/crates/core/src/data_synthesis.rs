//! Procedural membrane/nuclei slice pairs with exact ground-truth masks.
//!
//! A slice is a handful of non-overlapping elliptical cells. The membrane
//! domain shows each cell's boundary ring, the nuclei domain one disc per cell
//! placed strictly inside the ring's cavity with at least a one-pixel gap, so
//! the two masks (tested at pixel centres) are disjoint by construction.
//! Rendered images are antialiased by 4×4 supersampling and carry clamped
//! Gaussian noise; masks are neither antialiased nor noisy.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{split_indices, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::gmi::BinaryMask;
use crate::imaging::{save_gray, Grid};
use crate::parallel;

/// Fraction of generated pairs tagged as test data.
pub const DEFAULT_TEST_FRACTION: f64 = 0.1;

const SUPERSAMPLE: usize = 4;
const CELL_GAP: f64 = 2.0;
const PACKING_ROUNDS: usize = 40;
const PACKING_TRIES: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbryoSpec {
    pub cell_count: usize,
    pub canvas_size: usize,
    pub membrane_thickness: f64,
    /// `(min, max)` nucleus radius in pixels.
    pub nucleus_radius_range: (f64, f64),
    /// Noise standard deviation as a fraction of the full gray range.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for EmbryoSpec {
    fn default() -> Self {
        EmbryoSpec {
            cell_count: 3,
            canvas_size: 64,
            membrane_thickness: 2.0,
            nucleus_radius_range: (2.5, 4.5),
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl EmbryoSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        EmbryoSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell_count == 0 {
            return Err(Error::validation("cell_count", "must be at least 1"));
        }
        if self.canvas_size < 16 {
            return Err(Error::validation(
                "canvas_size",
                format!("{} < 16", self.canvas_size),
            ));
        }
        if !(self.membrane_thickness.is_finite() && self.membrane_thickness > 0.0) {
            return Err(Error::validation(
                "membrane_thickness",
                "must be a positive number of pixels",
            ));
        }
        let (lo, hi) = self.nucleus_radius_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0) {
            return Err(Error::validation(
                "nucleus_radius_range",
                "radii must be positive",
            ));
        }
        if lo > hi {
            return Err(Error::validation(
                "nucleus_radius_range",
                format!("inverted range ({lo}, {hi})"),
            ));
        }
        if !(0.0..1.0).contains(&self.noise_sigma) {
            return Err(Error::validation(
                "noise_sigma",
                format!("{} not in [0, 1)", self.noise_sigma),
            ));
        }
        let (min_axis, _) = self.axis_bounds();
        if 2.0 * min_axis + 2.0 > self.canvas_size as f64 {
            return Err(Error::validation(
                "canvas_size",
                format!("too small for cells of semi-axis {min_axis:.1}"),
            ));
        }
        Ok(())
    }

    /// Semi-axis bounds. The lower bound keeps every cavity wide enough for the
    /// largest nucleus plus a one-pixel gap on each side.
    fn axis_bounds(&self) -> (f64, f64) {
        let lo = self.nucleus_radius_range.1 + self.membrane_thickness + 2.0;
        let hi = 0.9 * self.canvas_size as f64 / (2.0 + 2.0 * (self.cell_count as f64).sqrt());
        (lo, hi.max(lo))
    }
}

/// One elliptical cell and its nucleus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub angle: f64,
    pub nucleus_center: (f64, f64),
    pub nucleus_radius: f64,
}

impl Cell {
    fn ellipse_value(&self, x: f64, y: f64, shrink: f64) -> f64 {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let (a, b) = (self.semi_axes.0 - shrink, self.semi_axes.1 - shrink);
        (u / a).powi(2) + (v / b).powi(2)
    }

    pub fn in_membrane(&self, x: f64, y: f64, thickness: f64) -> bool {
        self.ellipse_value(x, y, 0.0) <= 1.0 && self.ellipse_value(x, y, thickness) > 1.0
    }

    pub fn in_nucleus(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.nucleus_center.0, y - self.nucleus_center.1);
        dx * dx + dy * dy <= self.nucleus_radius * self.nucleus_radius
    }

    /// Whether `(x, y)` lies inside the cell's outer boundary.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.ellipse_value(x, y, 0.0) <= 1.0
    }

    fn bounding_radius(&self) -> f64 {
        self.semi_axes.0.max(self.semi_axes.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthPair {
    pub membrane_image: Grid,
    pub nuclei_image: Grid,
    pub membrane_mask: BinaryMask,
    pub nuclei_mask: BinaryMask,
    pub seed: u64,
    pub cells: Vec<Cell>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seeded rejection packing of `spec.cell_count` cells with non-overlapping
/// bounding circles; the admissible size range shrinks when a round fails.
pub fn layout(spec: &EmbryoSpec) -> Result<Vec<Cell>> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 1);
    let size = spec.canvas_size as f64;
    let t = spec.membrane_thickness;
    let (r_lo, r_hi) = spec.nucleus_radius_range;
    let (lo, mut hi) = spec.axis_bounds();
    for _ in 0..PACKING_ROUNDS {
        let mut cells: Vec<Cell> = Vec::with_capacity(spec.cell_count);
        for _ in 0..PACKING_TRIES {
            if cells.len() == spec.cell_count {
                break;
            }
            let a = rng.gen_range(lo..=hi);
            let b = rng.gen_range(lo.max(0.7 * a)..=a);
            let margin = a + 1.0;
            if 2.0 * margin > size {
                continue;
            }
            let center = (
                rng.gen_range(margin..=size - margin),
                rng.gen_range(margin..=size - margin),
            );
            let clear = cells.iter().all(|c| {
                let d = ((c.center.0 - center.0).powi(2) + (c.center.1 - center.1).powi(2)).sqrt();
                d >= c.bounding_radius() + a + CELL_GAP
            });
            if !clear {
                continue;
            }
            let angle = rng.gen_range(0.0..PI);
            let radius = rng.gen_range(r_lo..=r_hi);
            let cavity = b - t - 1.0;
            let reach = (cavity - radius).max(0.0);
            let (dist, theta) = (
                reach * rng.gen::<f64>().sqrt(),
                rng.gen_range(0.0..2.0 * PI),
            );
            cells.push(Cell {
                center,
                semi_axes: (a, b),
                angle,
                nucleus_center: (center.0 + dist * theta.cos(), center.1 + dist * theta.sin()),
                nucleus_radius: radius,
            });
        }
        if cells.len() == spec.cell_count {
            return Ok(cells);
        }
        hi = lo + 0.85 * (hi - lo);
    }
    Err(Error::validation(
        "cell_count",
        format!(
            "cannot pack {} cells into a {}-pixel canvas",
            spec.cell_count, spec.canvas_size
        ),
    ))
}

fn render(
    size: usize,
    noise: f64,
    rng: &mut dyn RngCore,
    inside: impl Fn(f64, f64) -> bool,
) -> Grid {
    let mut grid = Grid::filled(size, size, -1.0);
    let samples = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let normal = (noise > 0.0).then(|| Normal::new(0.0, 2.0 * noise).expect("finite std"));
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    hits += inside(px, py) as usize;
                }
            }
            let mut v = -1.0 + 2.0 * hits as f64 / samples;
            if let Some(n) = &normal {
                v += n.sample(rng);
            }
            grid.set(x, y, v.clamp(-1.0, 1.0) as f32);
        }
    }
    grid
}

fn rasterize(size: usize, inside: impl Fn(f64, f64) -> bool) -> BinaryMask {
    let mut mask = BinaryMask::empty(size, size);
    for y in 0..size {
        for x in 0..size {
            mask.set(x, y, inside(x as f64 + 0.5, y as f64 + 0.5));
        }
    }
    mask
}

pub fn generate_pair(spec: &EmbryoSpec) -> Result<GroundTruthPair> {
    let cells = layout(spec)?;
    let size = spec.canvas_size;
    let t = spec.membrane_thickness;
    let membrane = |x: f64, y: f64| cells.iter().any(|c| c.in_membrane(x, y, t));
    let nucleus = |x: f64, y: f64| cells.iter().any(|c| c.in_nucleus(x, y));
    let mut noise = stream_rng(spec.seed, 2);
    Ok(GroundTruthPair {
        membrane_image: render(size, spec.noise_sigma, &mut noise, membrane),
        nuclei_image: render(size, spec.noise_sigma, &mut noise, nucleus),
        membrane_mask: rasterize(size, membrane),
        nuclei_mask: rasterize(size, nucleus),
        seed: spec.seed,
        cells,
    })
}

/// Seed of pair `index` within a dataset generated from `template_seed`.
pub fn pair_seed(template_seed: u64, index: usize) -> u64 {
    stream_rng(template_seed, 3 + index as u64).next_u64()
}

pub fn pair_id(index: usize) -> String {
    format!("pair_{index:05}")
}

/// Writes `n_pairs` pairs and their masks as PNGs below `out_dir`, plus
/// `manifest.txt`; the test split is a seeded `floor(n · fraction)` subset.
pub fn generate_dataset(template: &EmbryoSpec, n_pairs: usize, out_dir: &Path) -> Result<Manifest> {
    generate_dataset_with_split(template, n_pairs, out_dir, DEFAULT_TEST_FRACTION)
}

pub fn generate_dataset_with_split(
    template: &EmbryoSpec,
    n_pairs: usize,
    out_dir: &Path,
    test_fraction: f64,
) -> Result<Manifest> {
    if n_pairs == 0 {
        return Err(Error::validation("n_pairs", "must be at least 1"));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::validation(
            "test_fraction",
            format!("{test_fraction} not in [0, 1)"),
        ));
    }
    template.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let splits = split_indices(n_pairs, test_fraction, template.seed);
    let entries = parallel::map_indexed(n_pairs, |i| -> Result<ManifestEntry> {
        let seed = pair_seed(template.seed, i);
        let pair = generate_pair(&template.with_seed(seed))?;
        let id = pair_id(i);
        let rel = |dir: &str| PathBuf::from(dir).join(format!("{id}.png"));
        let entry = ManifestEntry {
            pair_id: id.clone(),
            split: splits[i],
            membrane: rel("membrane"),
            nuclei: rel("nuclei"),
            membrane_mask: Some(rel("membrane_mask")),
            nuclei_mask: Some(rel("nuclei_mask")),
            seed: Some(seed),
        };
        pair.membrane_image
            .save_png(&out_dir.join(&entry.membrane))?;
        pair.nuclei_image.save_png(&out_dir.join(&entry.nuclei))?;
        save_gray(
            &pair.membrane_mask.to_gray8(),
            &out_dir.join(entry.membrane_mask.as_ref().unwrap()),
        )?;
        save_gray(
            &pair.nuclei_mask.to_gray8(),
            &out_dir.join(entry.nuclei_mask.as_ref().unwrap()),
        )?;
        Ok(entry)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub const MANIFEST_FILE: &str = "manifest.txt";
