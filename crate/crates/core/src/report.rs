//! Presentation of results: contact sheets, the matched-fraction summary
//! table, loss-curve plots and an image sharpness measure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::gmi::GmiReport;
use crate::imaging::{save_gray, Grid};
use crate::losses::LossReport;

const GAP: u32 = 2;
const GAP_SHADE: u8 = 255;

/// Tiles grids row by row with a white two-pixel gap. Rows may differ in
/// length; all grids must share one size.
pub fn contact_sheet(rows: &[Vec<&Grid>]) -> Result<GrayImage> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::validation("contact sheet", "no images"))?;
    let (w, h) = first.dims();
    if let Some(g) = rows.iter().flatten().find(|g| g.dims() != (w, h)) {
        return Err(Error::shape(
            "contact sheet tile",
            format!("{w}x{h}"),
            format!("{:?}", g.dims()),
        ));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let (w, h) = (w as u32, h as u32);
    let mut sheet = GrayImage::from_pixel(
        cols * (w + GAP) + GAP,
        rows.len() as u32 * (h + GAP) + GAP,
        Luma([GAP_SHADE]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, g) in row.iter().enumerate() {
            let tile = g.to_gray8();
            image::imageops::replace(
                &mut sheet,
                &tile,
                (GAP + c as u32 * (w + GAP)) as i64,
                (GAP + r as u32 * (h + GAP)) as i64,
            );
        }
    }
    Ok(sheet)
}

/// Rows alternate domain A and domain B, `per_row` pairs wide.
pub fn pair_sheet(a: &[Grid], b: &[Grid], per_row: usize) -> Result<GrayImage> {
    if a.len() != b.len() {
        return Err(Error::validation(
            "contact sheet",
            format!("{} A vs {} B images", a.len(), b.len()),
        ));
    }
    let per_row = per_row.max(1);
    let mut rows = Vec::new();
    for (ca, cb) in a.chunks(per_row).zip(b.chunks(per_row)) {
        rows.push(ca.iter().collect());
        rows.push(cb.iter().collect());
    }
    contact_sheet(&rows)
}

/// Mean squared response of the discrete Laplacian: higher means sharper.
pub fn high_frequency_energy(g: &Grid) -> f64 {
    let (w, h) = g.dims();
    if w < 3 || h < 3 {
        return 0.0;
    }
    let mut sum = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let lap = 4.0 * g.get(x, y) as f64
                - g.get(x - 1, y) as f64
                - g.get(x + 1, y) as f64
                - g.get(x, y - 1) as f64
                - g.get(x, y + 1) as f64;
            sum += lap * lap;
        }
    }
    sum / ((w - 2) * (h - 2)) as f64
}

/// Matched fraction per threshold summarized over runs of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub runs: usize,
    pub thresholds: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Mean and sample standard deviation (0 for a single run).
pub fn summarize(label: &str, reports: &[GmiReport]) -> Result<SummaryRow> {
    let first = reports
        .first()
        .ok_or_else(|| Error::validation("report", format!("no GMI reports for '{label}'")))?;
    if let Some(r) = reports.iter().find(|r| r.thresholds != first.thresholds) {
        return Err(Error::validation(
            "report",
            format!(
                "threshold sets differ: {:?} vs {:?}",
                first.thresholds, r.thresholds
            ),
        ));
    }
    let n = reports.len() as f64;
    let k = first.thresholds.len();
    let mut mean = vec![0.0; k];
    let mut std = vec![0.0; k];
    for i in 0..k {
        let vals: Vec<f64> = reports.iter().map(|r| r.matched_fraction[i]).collect();
        mean[i] = vals.iter().sum::<f64>() / n;
        if reports.len() > 1 {
            std[i] = (vals.iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        }
    }
    Ok(SummaryRow {
        label: label.to_string(),
        runs: reports.len(),
        thresholds: first.thresholds.clone(),
        mean,
        std,
    })
}

/// Text table of matched fractions (percent, mean ± std) per threshold.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let Some(first) = rows.first() else {
        return out;
    };
    let _ = write!(out, "{:<16} {:>4}", "model", "runs");
    for t in &first.thresholds {
        let _ = write!(out, " {:>16}", format!("TS {t}"));
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<16} {:>4}", r.label, r.runs);
        for (m, s) in r.mean.iter().zip(&r.std) {
            let _ = write!(
                out,
                " {:>16}",
                format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s)
            );
        }
        out.push('\n');
    }
    out
}

type Column = (&'static str, fn(&LossReport) -> Option<f64>);

const COLUMNS: [Column; 6] = [
    ("adv_A", |r| r.adv_a),
    ("adv_B", |r| r.adv_b),
    ("id_A", |r| r.id_a),
    ("id_B", |r| r.id_b),
    ("pm_A", |r| r.pm_a),
    ("pm_B", |r| r.pm_b),
];

/// One `loss_<column>.png` per logged column that has values. The plots carry
/// no text: x is the step, y spans the column's range.
pub fn plot_losses(reports: &[LossReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (name, get) in COLUMNS {
        let pts: Vec<(f64, f64)> = reports
            .iter()
            .filter_map(|r| get(r).map(|v| (r.step as f64, v)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let path = out_dir.join(format!("loss_{name}.png"));
        draw_series(&pts, &path).map_err(|message| Error::Image {
            path: path.clone(),
            message,
        })?;
        written.push(path);
    }
    Ok(written)
}

fn draw_series(pts: &[(f64, f64)], path: &Path) -> std::result::Result<(), String> {
    let (x0, x1) = pts
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = pts
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    const W: u32 = 640;
    const H: u32 = 360;
    let mut buf = vec![0u8; (W * H * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (W, H)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| e.to_string())?;
        let mut chart = ChartBuilder::on(&root)
            .margin(12)
            .build_cartesian_2d(x0..x1.max(x0 + 1.0), (y0 - pad)..(y1 + pad))
            .map_err(|e| e.to_string())?;
        chart
            .plotting_area()
            .draw(&Rectangle::new(
                [(x0, y0 - pad), (x1.max(x0 + 1.0), y1 + pad)],
                BLACK.stroke_width(1),
            ))
            .map_err(|e| e.to_string())?;
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), BLUE.stroke_width(1)))
            .map_err(|e| e.to_string())?;
        root.present().map_err(|e| e.to_string())?;
    }
    let img = image::RgbImage::from_raw(W, H, buf).ok_or("plot buffer size")?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| e.to_string())
}

pub fn save_sheet(sheet: &GrayImage, path: &Path) -> Result<()> {
    save_gray(sheet, path)
}
