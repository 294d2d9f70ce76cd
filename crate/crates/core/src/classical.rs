//! Non-learned enhancement primitives used as preprocessors and heads:
//! histogram equalization, CLAHE, pixel-wise gamma and exposure fusion.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};

/// Histogram configuration shared by [`histogram_equalize`] and [`clahe`].
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct HistogramSpec {
    pub bins: usize,
    /// CLAHE clip limit as a multiple of the mean bin count.
    pub clip_limit: f32,
    /// CLAHE tile grid as (rows, cols).
    pub tile_grid: (usize, usize),
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec {
            bins: 256,
            clip_limit: 2.0,
            tile_grid: (8, 8),
        }
    }
}

impl HistogramSpec {
    fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::config("histogram needs at least 2 bins"));
        }
        if !(self.clip_limit > 0.0) {
            return Err(Error::config("clip_limit must be > 0"));
        }
        if self.tile_grid.0 < 1 || self.tile_grid.1 < 1 {
            return Err(Error::config("tile grid dims must be >= 1"));
        }
        Ok(())
    }
}

pub(crate) fn bin_of(v: f32, bins: usize) -> usize {
    ((v * bins as f32) as usize).min(bins - 1)
}

/// Box-downsamples a plane by an integer factor (trailing remainder rows and
/// columns fold into the last cell).
pub(crate) fn downsample_box(plane: &Array2<f32>, factor: usize) -> Array2<f32> {
    if factor <= 1 {
        return plane.clone();
    }
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let (oh, ow) = ((h / factor).max(1), (w / factor).max(1));
    let mut out = Array2::zeros((oh, ow));
    for oy in 0..oh {
        for ox in 0..ow {
            let y1 = if oy + 1 == oh { h } else { (oy + 1) * factor };
            let x1 = if ox + 1 == ow { w } else { (ox + 1) * factor };
            let mut acc = 0f64;
            let mut count = 0usize;
            for y in oy * factor..y1 {
                for x in ox * factor..x1 {
                    acc += plane[[y, x]] as f64;
                    count += 1;
                }
            }
            out[[oy, ox]] = (acc / count as f64) as f32;
        }
    }
    out
}

/// Histogram equalization of `plane` through a CDF estimated on a (possibly
/// downscaled) reference plane. `downscale = 1` is plain HE.
pub(crate) fn equalize_via_downscaled_cdf(
    plane: &Array2<f32>,
    bins: usize,
    downscale: usize,
) -> Array2<f32> {
    if is_constant(plane) {
        return plane.clone();
    }
    let reference = downsample_box(plane, downscale);
    let mut hist = vec![0f64; bins];
    for &v in reference.iter() {
        hist[bin_of(v, bins)] += 1.0;
    }
    let cdf = clipped_cdf(&hist, reference.len() as f64, f64::INFINITY);
    plane.mapv(|v| cdf[bin_of(v, bins)] as f32)
}

/// CDF lookup table of a histogram over [0,1] after optional clipping.
///
/// `clip_limit` is in multiples of the mean bin count; excess mass is
/// redistributed uniformly in a single pass.
fn clipped_cdf(hist: &[f64], total: f64, clip_limit: f64) -> Vec<f64> {
    let bins = hist.len();
    let mut h = hist.to_vec();
    if clip_limit.is_finite() {
        let clip = clip_limit * total / bins as f64;
        let mut excess = 0.0;
        for v in h.iter_mut() {
            if *v > clip {
                excess += *v - clip;
                *v = clip;
            }
        }
        let share = excess / bins as f64;
        for v in h.iter_mut() {
            *v += share;
        }
    }
    let mut cdf = Vec::with_capacity(bins);
    let mut acc = 0.0;
    for v in &h {
        acc += v;
        cdf.push(acc / total);
    }
    cdf
}

fn is_constant(channel: &Array2<f32>) -> bool {
    let mut it = channel.iter();
    match it.next() {
        Some(first) => it.all(|v| v == first),
        None => true,
    }
}

fn expect_unit_single(channel: &ImageTensor) -> Result<()> {
    channel.expect_channels(1)?;
    if channel.range != ValueRange::UNIT {
        return Err(Error::domain("expected a [0,1] channel"));
    }
    Ok(())
}

/// Global histogram equalization: maps each value through the image CDF.
///
/// A constant image is returned unchanged (the degenerate CDF would
/// otherwise send everything to 1.0).
pub fn histogram_equalize(channel: &ImageTensor, spec: &HistogramSpec) -> Result<ImageTensor> {
    expect_unit_single(channel)?;
    spec.validate()?;
    let plane = channel.channel(0).to_owned();
    if is_constant(&plane) {
        return Ok(channel.clone());
    }
    let mut hist = vec![0f64; spec.bins];
    for &v in plane.iter() {
        hist[bin_of(v, spec.bins)] += 1.0;
    }
    let cdf = clipped_cdf(&hist, plane.len() as f64, f64::INFINITY);
    let out = plane.mapv(|v| cdf[bin_of(v, spec.bins)] as f32);
    Ok(ImageTensor::unchecked(
        out.insert_axis(ndarray::Axis(0)),
        ValueRange::UNIT,
    ))
}

/// Contrast-limited adaptive histogram equalization.
///
/// Per-tile histograms are clipped at `clip_limit x` the mean bin count with
/// single-pass uniform redistribution; each pixel is mapped through a
/// bilinear blend of the four surrounding tile CDFs.
pub fn clahe(channel: &ImageTensor, spec: &HistogramSpec) -> Result<ImageTensor> {
    expect_unit_single(channel)?;
    spec.validate()?;
    let (rows, cols) = spec.tile_grid;
    let (h, w) = (channel.height(), channel.width());
    if rows > h || cols > w {
        return Err(Error::config(format!(
            "tile grid {rows}x{cols} larger than image {h}x{w}"
        )));
    }
    let plane = channel.channel(0).to_owned();
    if is_constant(&plane) {
        return Ok(channel.clone());
    }

    // Tile r covers rows [edge(r), edge(r+1)).
    let row_edge = |i: usize| i * h / rows;
    let col_edge = |j: usize| j * w / cols;

    let mut luts = vec![Vec::new(); rows * cols];
    for tr in 0..rows {
        for tc in 0..cols {
            let (y0, y1) = (row_edge(tr), row_edge(tr + 1));
            let (x0, x1) = (col_edge(tc), col_edge(tc + 1));
            let mut hist = vec![0f64; spec.bins];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bin_of(plane[[y, x]], spec.bins)] += 1.0;
                }
            }
            let total = ((y1 - y0) * (x1 - x0)) as f64;
            luts[tr * cols + tc] = clipped_cdf(&hist, total, spec.clip_limit as f64);
        }
    }

    // Tile centers in pixel-index coordinates.
    let row_center = |i: usize| (row_edge(i) + row_edge(i + 1) - 1) as f64 / 2.0;
    let col_center = |j: usize| (col_edge(j) + col_edge(j + 1) - 1) as f64 / 2.0;

    // Index of the lower neighbor and the interpolation weight toward the
    // upper one, clamped at the borders.
    let locate = |pos: f64, n: usize, center: &dyn Fn(usize) -> f64| -> (usize, usize, f64) {
        if pos <= center(0) || n == 1 {
            return (0, 0, 0.0);
        }
        if pos >= center(n - 1) {
            return (n - 1, n - 1, 0.0);
        }
        let mut i = 0;
        while i + 1 < n && center(i + 1) <= pos {
            i += 1;
        }
        if center(i) == pos {
            return (i, i, 0.0);
        }
        let f = (pos - center(i)) / (center(i + 1) - center(i));
        (i, i + 1, f)
    };

    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        let (r0, r1, fy) = locate(y as f64, rows, &row_center);
        for x in 0..w {
            let (c0, c1, fx) = locate(x as f64, cols, &col_center);
            let b = bin_of(plane[[y, x]], spec.bins);
            let v00 = luts[r0 * cols + c0][b];
            let v01 = luts[r0 * cols + c1][b];
            let v10 = luts[r1 * cols + c0][b];
            let v11 = luts[r1 * cols + c1][b];
            let top = v00 * (1.0 - fx) + v01 * fx;
            let bot = v10 * (1.0 - fx) + v11 * fx;
            out[[y, x]] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(ImageTensor::unchecked(
        out.insert_axis(ndarray::Axis(0)),
        ValueRange::UNIT,
    ))
}

/// Base floor applied before exponentiation so gradients stay finite at black.
pub const GAMMA_BASE_FLOOR: f32 = 1e-6;

/// Per-pixel gamma: `out[p] = max(img[p], 1e-6) ^ gamma[p]`.
///
/// `gamma` is a single-channel map shared across image channels. The
/// differentiable counterpart lives in the autodiff tape (`pow_elem`).
pub fn apply_gamma_map(img: &ImageTensor, gamma: &ImageTensor) -> Result<ImageTensor> {
    gamma.expect_channels(1)?;
    img.expect_same_dims(gamma)?;
    for &g in gamma.data.iter() {
        if !(g > 0.0) {
            return Err(Error::domain(format!("gamma map value {g} must be > 0")));
        }
    }
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let base = img.data[[ch, y, x]].max(GAMMA_BASE_FLOOR) as f64;
                out[[ch, y, x]] = base.powf(gamma.data[[0, y, x]] as f64) as f32;
            }
        }
    }
    Ok(ImageTensor::unchecked(out, img.range))
}

/// Per-pixel softmax weights over `n` fusion candidates.
pub fn fusion_weights(logits: &Array3<f32>) -> Array3<f32> {
    let (n, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let mut weights = Array3::zeros((n, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut maxv = f32::NEG_INFINITY;
            for i in 0..n {
                maxv = maxv.max(logits[[i, y, x]]);
            }
            let mut denom = 0f64;
            for i in 0..n {
                denom += ((logits[[i, y, x]] - maxv) as f64).exp();
            }
            for i in 0..n {
                weights[[i, y, x]] = (((logits[[i, y, x]] - maxv) as f64).exp() / denom) as f32;
            }
        }
    }
    weights
}

/// Blends N exposures with per-pixel softmax weights from `logits` (N,H,W).
pub fn exposure_fusion(exposures: &[ImageTensor], logits: &Array3<f32>) -> Result<ImageTensor> {
    if exposures.is_empty() {
        return Err(Error::shape("exposure_fusion needs at least one exposure"));
    }
    let first = &exposures[0];
    for e in exposures.iter().skip(1) {
        if e.data.shape() != first.data.shape() {
            return Err(Error::shape("exposures must share a common shape"));
        }
    }
    if logits.shape()[0] != exposures.len()
        || logits.shape()[1] != first.height()
        || logits.shape()[2] != first.width()
    {
        return Err(Error::shape(format!(
            "logits shape {:?} does not match {} exposures of {}x{}",
            logits.shape(),
            exposures.len(),
            first.height(),
            first.width()
        )));
    }
    let weights = fusion_weights(logits);
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut out = Array3::<f32>::zeros((c, h, w));
    for (i, e) in exposures.iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[ch, y, x]] += weights[[i, y, x]] * e.data[[ch, y, x]];
                }
            }
        }
    }
    Ok(ImageTensor::unchecked(out, first.range))
}
