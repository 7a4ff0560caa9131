//! Evaluation metrics, patch-performance heatmaps, and scatter exports.
//!
//! Heatmap color bins are half-open intervals over test MAE in years:
//! red below 3.0, orange [3.0, 3.5), green [3.5, 4.0), blue at 4.0 and
//! above. Overlay volumes resolve overlapping patches by letting the
//! lowest-MAE covering patch win; ties go to the lower patch index.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{enumerate_patches, GridSpec};
use crate::linalg::simple_linear_fit;
use crate::volume::Volume;

/// Summary metrics for one labelled prediction column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub n_subjects: usize,
    pub mae_years: f64,
    pub r2: f64,
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::config(format!(
            "metrics need matching non-empty vectors, got {} predictions and {} targets",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Mean absolute error in the units of the inputs.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let total: f64 = pred.iter().zip(truth).map(|(&p, &t)| (p - t).abs()).sum();
    Ok(total / pred.len() as f64)
}

/// Coefficient of determination, 1 - SS_res / SS_tot with SS_tot taken about
/// the mean of `truth`. Constant targets make the score undefined.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|&t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::numeric(
            "r2 is undefined when every target has the same value",
        ));
    }
    let ss_res: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// The constant predictor that always answers the training-set mean age.
pub fn null_model(train_ages: &[f64]) -> Result<f64> {
    if train_ages.is_empty() {
        return Err(Error::config(
            "null model needs at least one training age",
        ));
    }
    Ok(train_ages.iter().sum::<f64>() / train_ages.len() as f64)
}

/// Computes both summary metrics for one prediction column.
pub fn evaluate(label: &str, pred: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        label: label.to_string(),
        n_subjects: pred.len(),
        mae_years: mae(pred, truth)?,
        r2: r2(pred, truth)?,
    })
}

/// Performance color bin for one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorBin {
    Red,
    Orange,
    Green,
    Blue,
}

impl ColorBin {
    /// Stable numeric code stored in overlay volumes.
    pub fn code(self) -> u8 {
        match self {
            ColorBin::Red => 0,
            ColorBin::Orange => 1,
            ColorBin::Green => 2,
            ColorBin::Blue => 3,
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ColorBin::Red => [220, 50, 47],
            ColorBin::Orange => [255, 165, 0],
            ColorBin::Green => [60, 160, 60],
            ColorBin::Blue => [50, 90, 220],
        }
    }
}

/// Color used for voxels no patch covers (possible with permissive tilings).
const UNCOVERED_CODE: u8 = 255;
const UNCOVERED_RGB: [u8; 3] = [40, 40, 40];

/// Assigns the half-open color bin for a test MAE in years.
pub fn color_bin(mae_years: f64) -> Result<ColorBin> {
    if !mae_years.is_finite() {
        return Err(Error::numeric(format!(
            "cannot bin a non-finite MAE ({mae_years})"
        )));
    }
    Ok(if mae_years < 3.0 {
        ColorBin::Red
    } else if mae_years < 3.5 {
        ColorBin::Orange
    } else if mae_years < 4.0 {
        ColorBin::Green
    } else {
        ColorBin::Blue
    })
}

/// Per-patch performance bins plus everything needed to render overlays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchHeatmap {
    pub grid: GridSpec,
    pub mae_years: Vec<f64>,
    pub bins: Vec<ColorBin>,
}

/// Bins one MAE per patch of `grid`.
pub fn build_heatmap(grid: &GridSpec, per_patch_mae: &[f64]) -> Result<PatchHeatmap> {
    grid.validate()?;
    let expected = grid.patch_count();
    if per_patch_mae.len() != expected {
        return Err(Error::config(format!(
            "heatmap needs one MAE per patch: got {} values for {} patches",
            per_patch_mae.len(),
            expected
        )));
    }
    let bins = per_patch_mae
        .iter()
        .map(|&m| color_bin(m))
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchHeatmap {
        grid: *grid,
        mae_years: per_patch_mae.to_vec(),
        bins,
    })
}

impl PatchHeatmap {
    /// Paints every voxel of the cropped volume with the bin code of its
    /// best (lowest-MAE) covering patch. Voxels outside every patch get the
    /// uncovered code.
    pub fn overlay_volume(&self) -> Result<Volume> {
        let dims = self.grid.crop_dims;
        let n = dims[0] * dims[1] * dims[2];
        let mut best = vec![f64::INFINITY; n];
        let mut codes = vec![UNCOVERED_CODE as f64; n];
        for patch in enumerate_patches(&self.grid)? {
            let m = self.mae_years[patch.index];
            let code = self.bins[patch.index].code() as f64;
            let [o0, o1, o2] = patch.offset;
            let [p0, p1, p2] = self.grid.patch_size;
            for i0 in o0..o0 + p0 {
                for i1 in o1..o1 + p1 {
                    let row = (i0 * dims[1] + i1) * dims[2] + o2;
                    for at in row..row + p2 {
                        if m < best[at] {
                            best[at] = m;
                            codes[at] = code;
                        }
                    }
                }
            }
        }
        Volume::new(dims, [1.0; 3], codes)
    }

    /// Central transverse slice (fixed last axis) as a binary PPM image.
    pub fn render_transverse(&self) -> Result<Ppm> {
        let overlay = self.overlay_volume()?;
        let [d0, d1, d2] = overlay.dims();
        let fixed = d2 / 2;
        Ppm::from_codes(d1, d0, |col, row| overlay.get(row, col, fixed))
    }

    /// Mid-sagittal slice (fixed first axis) as a binary PPM image.
    pub fn render_sagittal(&self) -> Result<Ppm> {
        let overlay = self.overlay_volume()?;
        let [d0, d1, d2] = overlay.dims();
        let fixed = d0 / 2;
        Ppm::from_codes(d2, d1, |col, row| overlay.get(fixed, row, col))
    }
}

/// Minimal binary (P6) PPM image.
#[derive(Debug, Clone, PartialEq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Ppm {
    fn from_codes(
        width: usize,
        height: usize,
        code_at: impl Fn(usize, usize) -> f64,
    ) -> Result<Ppm> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for row in 0..height {
            for col in 0..width {
                let code = code_at(col, row);
                let rgb = match code as u8 {
                    0 => ColorBin::Red.rgb(),
                    1 => ColorBin::Orange.rgb(),
                    2 => ColorBin::Green.rgb(),
                    3 => ColorBin::Blue.rgb(),
                    _ => UNCOVERED_RGB,
                };
                pixels.extend_from_slice(&rgb);
            }
        }
        Ok(Ppm {
            width,
            height,
            pixels,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend_from_slice(&self.pixels);
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Writes a `true,pred` CSV plus an SVG scatter with the identity line and
/// the least-squares fit of predictions on true ages. Returns the fitted
/// (slope, intercept).
pub fn export_scatter(
    csv_path: &Path,
    svg_path: &Path,
    pred: &[f64],
    truth: &[f64],
) -> Result<(f64, f64)> {
    check_pair(pred, truth)?;
    let (slope, intercept) = simple_linear_fit(truth, pred)?;

    let mut csv = String::from("true,pred\n");
    for (t, p) in truth.iter().zip(pred) {
        let _ = writeln!(csv, "{t},{p}");
    }
    fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;

    let svg = render_scatter_svg(pred, truth, slope, intercept);
    fs::write(svg_path, svg).map_err(|e| Error::io(svg_path, e))?;
    Ok((slope, intercept))
}

fn render_scatter_svg(pred: &[f64], truth: &[f64], slope: f64, intercept: f64) -> String {
    const SIZE: f64 = 520.0;
    const MARGIN: f64 = 50.0;
    let lo = truth
        .iter()
        .chain(pred)
        .cloned()
        .fold(f64::INFINITY, f64::min)
        - 2.0;
    let hi = truth
        .iter()
        .chain(pred)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        + 2.0;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let sx = |v: f64| MARGIN + (v - lo) / span * (SIZE - 2.0 * MARGIN);
    let sy = |v: f64| SIZE - MARGIN - (v - lo) / span * (SIZE - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" \
         viewBox=\"0 0 {SIZE} {SIZE}\">"
    );
    let _ = writeln!(
        s,
        "  <rect x=\"0\" y=\"0\" width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        s,
        "  <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>",
        m = MARGIN,
        b = SIZE - MARGIN,
        r = SIZE - MARGIN
    );
    let _ = writeln!(
        s,
        "  <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>",
        m = MARGIN,
        b = SIZE - MARGIN
    );
    let _ = writeln!(
        s,
        "  <text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"middle\" font-size=\"14\">\
         chronological age (years)</text>",
        x = SIZE / 2.0,
        y = SIZE - 12.0
    );
    let _ = writeln!(
        s,
        "  <text x=\"16\" y=\"{y:.2}\" text-anchor=\"middle\" font-size=\"14\" \
         transform=\"rotate(-90 16 {y:.2})\">predicted age (years)</text>",
        y = SIZE / 2.0
    );
    for frac in [0.0, 0.5, 1.0] {
        let v = lo + frac * span;
        let _ = writeln!(
            s,
            "  <text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"middle\" font-size=\"11\">{v:.1}</text>",
            x = sx(v),
            y = SIZE - MARGIN + 18.0
        );
        let _ = writeln!(
            s,
            "  <text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"end\" font-size=\"11\">{v:.1}</text>",
            x = MARGIN - 6.0,
            y = sy(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        "  <line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" \
         stroke=\"black\" stroke-dasharray=\"6 4\"/>",
        x1 = sx(lo),
        y1 = sy(lo),
        x2 = sx(hi),
        y2 = sy(hi)
    );
    let _ = writeln!(
        s,
        "  <line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"#2060c0\"/>",
        x1 = sx(lo),
        y1 = sy(slope * lo + intercept),
        x2 = sx(hi),
        y2 = sy(slope * hi + intercept)
    );
    for (t, p) in truth.iter().zip(pred) {
        let _ = writeln!(
            s,
            "  <circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"#c04020\" fill-opacity=\"0.7\"/>",
            x = sx(*t),
            y = sy(*p)
        );
    }
    s.push_str("</svg>\n");
    s
}
