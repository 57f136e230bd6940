//! Geometric Matching Index: binarize both reconstructions of a pair, measure
//! their Dice overlap, and report the fraction of pairs whose overlap stays
//! strictly below each threshold.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ImagePair;
use crate::error::{Error, Result};
use crate::imaging::Grid;
use crate::networks::{successor_forward, Domain, ModelBundle};
use crate::parallel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::shape("mask bits", width * height, bits.len()));
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// {0, 255} 8-bit encoding.
    pub fn to_gray8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) {
                255
            } else {
                0
            }])
        })
    }

    /// Any non-zero pixel is set.
    pub fn from_gray8(img: &image::GrayImage) -> Self {
        BinaryMask {
            width: img.width() as usize,
            height: img.height() as usize,
            bits: img.pixels().map(|p| p.0[0] != 0).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", content = "threshold")]
pub enum Binarize {
    /// Pixel set iff `(v + 1) / 2 > t`.
    Fixed(f64),
    /// Threshold chosen by Otsu's between-class variance criterion.
    Otsu,
}

impl Default for Binarize {
    fn default() -> Self {
        Binarize::Fixed(0.5)
    }
}

const OTSU_BINS: usize = 256;

/// Otsu threshold on [0,1]-mapped intensities, or `None` for a constant image.
pub fn otsu_threshold(img: &Grid) -> Option<f64> {
    let mut hist = [0u64; OTSU_BINS];
    for &v in img.data() {
        let u = ((v as f64 + 1.0) / 2.0).clamp(0.0, 1.0);
        let bin = ((u * (OTSU_BINS - 1) as f64).round() as usize).min(OTSU_BINS - 1);
        hist[bin] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0u64, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0usize);
    for (i, &c) in hist.iter().enumerate() {
        w0 += c;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    // Pixels in bins <= best_bin form the background class.
    Some((best_bin as f64 + 0.5) / (OTSU_BINS - 1) as f64)
}

pub fn binarize(img: &Grid, method: Binarize) -> Result<BinaryMask> {
    if img.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("image", "non-finite pixel"));
    }
    let t = match method {
        Binarize::Fixed(t) => t,
        Binarize::Otsu => otsu_threshold(img).unwrap_or_else(|| {
            log::warn!("constant image under Otsu binarization; using fixed threshold 0.5");
            0.5
        }),
    };
    let bits = img
        .data()
        .iter()
        .map(|&v| (v as f64 + 1.0) / 2.0 > t)
        .collect();
    BinaryMask::new(img.width(), img.height(), bits)
}

/// Dice similarity `2|x∩y| / (|x|+|y|)`; 0 when both masks are empty.
pub fn dsc(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::shape(
            "dsc masks",
            format!("{}x{}", x.width, x.height),
            format!("{}x{}", y.width, y.height),
        ));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in x.bits.iter().zip(&y.bits) {
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    if total == 0 {
        log::debug!("degenerate pair: both masks empty");
        return Ok(0.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmiReport {
    /// `(pair_id, dsc)` sorted by pair id.
    pub dscs: Vec<(String, f64)>,
    pub thresholds: Vec<f64>,
    /// Fraction of pairs with DSC strictly below the matching threshold.
    pub matched_fraction: Vec<f64>,
    pub n_pairs: usize,
}

impl GmiReport {
    pub fn fraction_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.matched_fraction[i])
    }

    pub fn mean_dsc(&self) -> f64 {
        self.dscs.iter().map(|(_, d)| d).sum::<f64>() / self.n_pairs as f64
    }

    /// `pair_id,dsc` header and rows, then one `TS,<t>,matched_fraction,<f>` row per threshold.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "pair_id,dsc").expect("vec write");
        for (id, d) in &self.dscs {
            writeln!(out, "{id},{d}").expect("vec write");
        }
        for (t, f) in self.thresholds.iter().zip(&self.matched_fraction) {
            writeln!(out, "TS,{t},matched_fraction,{f}").expect("vec write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line as u64,
            message,
        };
        let mut dscs = Vec::new();
        let mut thresholds = Vec::new();
        let mut matched_fraction = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if line == 1 {
                if raw.trim() != "pair_id,dsc" {
                    return Err(parse_err(
                        line,
                        format!("expected header 'pair_id,dsc', got '{raw}'"),
                    ));
                }
                continue;
            }
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split(',').collect();
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(line, format!("'{s}': {e}")))
            };
            match fields.as_slice() {
                ["TS", t, "matched_fraction", f] => {
                    thresholds.push(num(t)?);
                    matched_fraction.push(num(f)?);
                }
                [id, d] if thresholds.is_empty() => dscs.push((id.to_string(), num(d)?)),
                _ => return Err(parse_err(line, format!("unexpected row '{raw}'"))),
            }
        }
        Ok(GmiReport {
            n_pairs: dscs.len(),
            dscs,
            thresholds,
            matched_fraction,
        })
    }
}

fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::validation("thresholds", "at least one required"));
    }
    for &t in thresholds {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::validation("thresholds", format!("{t} not in (0,1]")));
        }
    }
    Ok(())
}

/// Matched fractions for already computed per-pair DSC values.
pub fn gmi_from_dscs(mut dscs: Vec<(String, f64)>, thresholds: &[f64]) -> Result<GmiReport> {
    validate_thresholds(thresholds)?;
    if dscs.is_empty() {
        return Err(Error::validation(
            "test set",
            "empty; the matched fraction is undefined",
        ));
    }
    dscs.sort_by(|a, b| a.0.cmp(&b.0));
    let n = dscs.len();
    let matched_fraction = thresholds
        .iter()
        .map(|&t| dscs.iter().filter(|(_, d)| *d < t).count() as f64 / n as f64)
        .collect();
    Ok(GmiReport {
        dscs,
        thresholds: thresholds.to_vec(),
        matched_fraction,
        n_pairs: n,
    })
}

/// GMI over already binarized pairs.
pub fn gmi_from_masks(
    pairs: &[(String, BinaryMask, BinaryMask)],
    thresholds: &[f64],
) -> Result<GmiReport> {
    let dscs = pairs
        .iter()
        .map(|(id, x, y)| Ok((id.clone(), dsc(x, y)?)))
        .collect::<Result<Vec<_>>>()?;
    gmi_from_dscs(dscs, thresholds)
}

/// Reconstructions `(S_B(a), S_A(b))` for each pair, in inference mode.
pub fn reconstruct_pairs(
    pairs: &[ImagePair],
    bundle: &ModelBundle<f32>,
) -> Result<Vec<(Grid, Grid)>> {
    const CHUNK: usize = 16;
    let img = bundle.image_shape();
    let side = (img.w, img.h);
    let chunks = pairs.len().div_ceil(CHUNK);
    let per_chunk = parallel::map_indexed(chunks, |c| -> Result<Vec<(Grid, Grid)>> {
        let group = &pairs[c * CHUNK..((c + 1) * CHUNK).min(pairs.len())];
        let a_slices: Vec<&[f32]> = group.iter().map(|p| p.a.data()).collect();
        let b_slices: Vec<&[f32]> = group.iter().map(|p| p.b.data()).collect();
        let a = Tensor::stack(img, &a_slices)?;
        let b = Tensor::stack(img, &b_slices)?;
        let a_rec = successor_forward(bundle, Domain::B, &a)?;
        let b_rec = successor_forward(bundle, Domain::A, &b)?;
        (0..group.len())
            .map(|i| {
                Ok((
                    Grid::new(side.0, side.1, a_rec.sample(i).to_vec())?,
                    Grid::new(side.0, side.1, b_rec.sample(i).to_vec())?,
                ))
            })
            .collect()
    });
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in per_chunk {
        out.extend(chunk?);
    }
    Ok(out)
}

/// Runs the matching index over `test_pairs` with the bundle's Successors.
pub fn compute_gmi(
    test_pairs: &[ImagePair],
    bundle: &ModelBundle<f32>,
    thresholds: &[f64],
    method: Binarize,
) -> Result<GmiReport> {
    validate_thresholds(thresholds)?;
    if test_pairs.is_empty() {
        return Err(Error::validation(
            "test set",
            "empty; the matched fraction is undefined",
        ));
    }
    let recs = reconstruct_pairs(test_pairs, bundle)?;
    let dscs = parallel::map_indexed(recs.len(), |i| -> Result<(String, f64)> {
        let (a_rec, b_rec) = &recs[i];
        let ma = binarize(a_rec, method)?;
        let mb = binarize(b_rec, method)?;
        Ok((test_pairs[i].id.clone(), dsc(&ma, &mb)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    gmi_from_dscs(dscs, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(side: usize, on: &[usize]) -> BinaryMask {
        let mut bits = vec![false; side * side];
        for &i in on {
            bits[i] = true;
        }
        BinaryMask::new(side, side, bits).unwrap()
    }

    #[test]
    fn binarize_endpoints_and_halves() {
        let ones = Grid::filled(4, 4, 1.0);
        assert_eq!(binarize(&ones, Binarize::Fixed(0.5)).unwrap().count(), 16);
        let neg = Grid::filled(4, 4, -1.0);
        assert_eq!(binarize(&neg, Binarize::Fixed(0.5)).unwrap().count(), 0);
        let mut half = Grid::filled(4, 4, -1.0);
        for y in 0..4 {
            for x in 0..2 {
                half.set(x, y, 1.0);
            }
        }
        let m = binarize(&half, Binarize::Fixed(0.5)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(m.get(x, y), x < 2);
            }
        }
        assert_eq!(binarize(&half, Binarize::Otsu).unwrap(), m);
    }

    #[test]
    fn otsu_on_constant_image_falls_back() {
        let g = Grid::filled(3, 3, 0.2);
        assert!(otsu_threshold(&g).is_none());
        // (0.2 + 1) / 2 = 0.6 > 0.5
        assert_eq!(binarize(&g, Binarize::Otsu).unwrap().count(), 9);
    }

    #[test]
    fn dsc_cases() {
        let x = mask(4, &[0, 1, 2, 3]);
        assert_eq!(dsc(&x, &x).unwrap(), 1.0);
        assert_eq!(dsc(&x, &mask(4, &[8, 9])).unwrap(), 0.0);
        assert_eq!(dsc(&x, &mask(4, &[2, 3, 4, 5])).unwrap(), 0.5);
        assert_eq!(dsc(&mask(4, &[]), &mask(4, &[])).unwrap(), 0.0);
        assert!(dsc(&x, &mask(3, &[])).is_err());
    }

    #[test]
    fn equal_to_threshold_is_unmatched() {
        let r = gmi_from_dscs(vec![("p".into(), 0.2)], &[0.2, 0.21]).unwrap();
        assert_eq!(r.matched_fraction, vec![0.0, 1.0]);
    }

    #[test]
    fn empty_test_set_rejected() {
        assert!(matches!(
            gmi_from_dscs(vec![], &[0.1]),
            Err(Error::Validation { .. })
        ));
        assert!(gmi_from_dscs(vec![("p".into(), 0.1)], &[0.0]).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let r = gmi_from_dscs(vec![("b".into(), 0.25), ("a".into(), 0.05)], &[0.1, 0.3]).unwrap();
        assert_eq!(r.dscs[0].0, "a");
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "pair_id,dsc\na,0.05\nb,0.25\nTS,0.1,matched_fraction,0.5\nTS,0.3,matched_fraction,1\n"
        );
        assert_eq!(GmiReport::read_csv(&path).unwrap(), r);
    }

    #[test]
    fn malformed_report_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        std::fs::write(&path, "pair_id,dsc\na,0.1\nb,oops\n").unwrap();
        match GmiReport::read_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
