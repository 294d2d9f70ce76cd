//! Invertible color decompositions that decouple luminance and chrominance.
//!
//! All transforms are pure functions over [`ImageTensor`]s and are exact
//! round trips on their stated domains (see the per-function docs for the
//! tolerance). Per-pixel math runs in `f64` and is stored back as `f32`.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};

/// Declared range of a YUV image: Y in [0,1], U/V in [-0.5, 0.5].
pub const YUV_RANGE: ValueRange = ValueRange { lo: -0.5, hi: 1.0 };
/// Declared range of a LAB image: L in [0,100], a/b within +-110.
pub const LAB_RANGE: ValueRange = ValueRange { lo: -110.0, hi: 110.0 };

/// BT.601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Polarized hue-saturation plane plus an intensity channel.
///
/// `hv` is a 2-channel Cartesian chroma plane centered at zero whose radius
/// is bounded by the collapsed intensity; `intensity` is the per-pixel max
/// of RGB. `k` is the collapse strength the image was produced with, kept
/// so the inverse transform uses the same curve.
#[derive(Debug, Clone)]
pub struct HviImage {
    pub hv: Array3<f32>,
    pub intensity: Array3<f32>,
    pub k: f32,
}

impl HviImage {
    pub fn height(&self) -> usize {
        self.hv.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.hv.shape()[2]
    }

    /// Packs `(h, v, intensity)` into a single 3-channel array.
    pub fn to_planes(&self) -> Array3<f32> {
        let (h, w) = (self.height(), self.width());
        let mut out = Array3::zeros((3, h, w));
        out.slice_mut(ndarray::s![0..2, .., ..]).assign(&self.hv);
        out.slice_mut(ndarray::s![2..3, .., ..])
            .assign(&self.intensity);
        out
    }

    /// Inverse of [`HviImage::to_planes`].
    pub fn from_planes(planes: &Array3<f32>, k: f32) -> Result<Self> {
        if planes.shape()[0] != 3 {
            return Err(Error::shape("HVI planes must have 3 channels"));
        }
        Ok(HviImage {
            hv: planes.slice(ndarray::s![0..2, .., ..]).to_owned(),
            intensity: planes.slice(ndarray::s![2..3, .., ..]).to_owned(),
            k,
        })
    }
}

/// BT.601 luma of an RGB image: `0.299 R + 0.587 G + 0.114 B`.
pub fn rgb_to_grayscale(img: &ImageTensor) -> Result<ImageTensor> {
    img.expect_channels(3)?;
    let (h, w) = (img.height(), img.width());
    let mut out = Array3::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            let l = LUMA[0] * img.data[[0, y, x]] as f64
                + LUMA[1] * img.data[[1, y, x]] as f64
                + LUMA[2] * img.data[[2, y, x]] as f64;
            out[[0, y, x]] = l.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(ImageTensor::unchecked(out, ValueRange::UNIT))
}

/// RGB -> full-range BT.601 YUV (JFIF convention).
pub fn rgb_to_yuv(img: &ImageTensor) -> Result<ImageTensor> {
    img.expect_channels(3)?;
    let (h, w) = (img.height(), img.width());
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let r = img.data[[0, y, x]] as f64;
            let g = img.data[[1, y, x]] as f64;
            let b = img.data[[2, y, x]] as f64;
            let yy = LUMA[0] * r + LUMA[1] * g + LUMA[2] * b;
            let u = -0.168_735_891_647_7 * r - 0.331_264_108_352_3 * g + 0.5 * b;
            let v = 0.5 * r - 0.418_687_589_164_77 * g - 0.081_312_410_835_23 * b;
            out[[0, y, x]] = yy as f32;
            out[[1, y, x]] = u as f32;
            out[[2, y, x]] = v as f32;
        }
    }
    Ok(ImageTensor::unchecked(out, YUV_RANGE))
}

/// Inverse of [`rgb_to_yuv`]. Output is clamped to [0,1].
pub fn yuv_to_rgb(img: &ImageTensor) -> Result<ImageTensor> {
    img.expect_channels(3)?;
    let (h, w) = (img.height(), img.width());
    let mut out = Array3::zeros((3, h, w));
    for yy in 0..h {
        for x in 0..w {
            let y = img.data[[0, yy, x]] as f64;
            let u = img.data[[1, yy, x]] as f64;
            let v = img.data[[2, yy, x]] as f64;
            let r = y + 1.402 * v;
            let g = y - 0.344_136_286_201_02 * u - 0.714_136_286_201_02 * v;
            let b = y + 1.772 * u;
            out[[0, yy, x]] = r.clamp(0.0, 1.0) as f32;
            out[[1, yy, x]] = g.clamp(0.0, 1.0) as f32;
            out[[2, yy, x]] = b.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(ImageTensor::unchecked(out, ValueRange::UNIT))
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

// D65 white point of the sRGB working space.
const WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// sRGB -> CIELAB under D65. L in [0,100], a/b roughly within +-110.
pub fn rgb_to_lab(img: &ImageTensor) -> Result<ImageTensor> {
    img.expect_channels(3)?;
    let (h, w) = (img.height(), img.width());
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let r = srgb_to_linear(img.data[[0, y, x]] as f64);
            let g = srgb_to_linear(img.data[[1, y, x]] as f64);
            let b = srgb_to_linear(img.data[[2, y, x]] as f64);
            let xx = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
            let yy = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
            let zz = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
            let fx = lab_f(xx / WHITE[0]);
            let fy = lab_f(yy / WHITE[1]);
            let fz = lab_f(zz / WHITE[2]);
            out[[0, y, x]] = (116.0 * fy - 16.0) as f32;
            out[[1, y, x]] = (500.0 * (fx - fy)) as f32;
            out[[2, y, x]] = (200.0 * (fy - fz)) as f32;
        }
    }
    Ok(ImageTensor::unchecked(out, LAB_RANGE))
}

/// Inverse of [`rgb_to_lab`]. Output is clamped to [0,1].
pub fn lab_to_rgb(img: &ImageTensor) -> Result<ImageTensor> {
    img.expect_channels(3)?;
    let (h, w) = (img.height(), img.width());
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let l = img.data[[0, y, x]] as f64;
            let a = img.data[[1, y, x]] as f64;
            let bb = img.data[[2, y, x]] as f64;
            let fy = (l + 16.0) / 116.0;
            let fx = fy + a / 500.0;
            let fz = fy - bb / 200.0;
            let xx = WHITE[0] * lab_f_inv(fx);
            let yy = WHITE[1] * lab_f_inv(fy);
            let zz = WHITE[2] * lab_f_inv(fz);
            let r = 3.240_454_2 * xx - 1.537_138_5 * yy - 0.498_531_4 * zz;
            let g = -0.969_266_0 * xx + 1.876_010_8 * yy + 0.041_556_0 * zz;
            let b = 0.055_643_4 * xx - 0.204_025_9 * yy + 1.057_225_2 * zz;
            out[[0, y, x]] = linear_to_srgb(r).clamp(0.0, 1.0) as f32;
            out[[1, y, x]] = linear_to_srgb(g).clamp(0.0, 1.0) as f32;
            out[[2, y, x]] = linear_to_srgb(b).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(ImageTensor::unchecked(out, ValueRange::UNIT))
}

/// Monotone, endpoint-fixed intensity collapse `c(I) = sin(pi I / 2)^(1/k)`.
///
/// Larger `k` compresses the dynamic range of the dark end more strongly.
/// Scalar form; see [`rgb_to_hvi`] for its use as a chroma radius.
pub fn collapse_value(intensity: f64, k: f64) -> f64 {
    let s = (std::f64::consts::FRAC_PI_2 * intensity.clamp(0.0, 1.0)).sin();
    s.powf(1.0 / k)
}

/// Applies [`collapse_value`] to a map of intensities in [0,1].
pub fn intensity_collapse(intensity: &ImageTensor, k: f32) -> Result<ImageTensor> {
    check_k(k)?;
    img_in_unit(intensity)?;
    let out = intensity
        .data
        .mapv(|v| collapse_value(v as f64, k as f64) as f32);
    Ok(ImageTensor::unchecked(out, ValueRange::UNIT))
}

fn check_k(k: f32) -> Result<()> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::domain(format!("collapse strength k must be > 0, got {k}")));
    }
    Ok(())
}

fn img_in_unit(img: &ImageTensor) -> Result<()> {
    if img.range != ValueRange::UNIT {
        return Err(Error::domain("expected an image declared on [0,1]"));
    }
    Ok(())
}

/// RGB -> HVI with collapse strength `k`.
///
/// Intensity is the exact per-pixel max of RGB. Hue/saturation are mapped to
/// Cartesian coordinates with radius `c(I) * S`, which removes the hue
/// wrap-around at red and shrinks chroma in dark regions. Achromatic pixels
/// map to `hv = (0, 0)`.
pub fn rgb_to_hvi(img: &ImageTensor, k: f32) -> Result<HviImage> {
    img.expect_channels(3)?;
    check_k(k)?;
    let (h, w) = (img.height(), img.width());
    let mut hv = Array3::zeros((2, h, w));
    let mut intensity = Array3::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            let r = img.data[[0, y, x]];
            let g = img.data[[1, y, x]];
            let b = img.data[[2, y, x]];
            let maxc = r.max(g).max(b);
            intensity[[0, y, x]] = maxc;
            let (r, g, b) = (r as f64, g as f64, b as f64);
            let max = maxc as f64;
            let min = r.min(g).min(b);
            let delta = max - min;
            if delta <= 0.0 || max <= 0.0 {
                continue; // achromatic: hv stays (0, 0)
            }
            let sat = delta / max;
            let hue6 = if max == r {
                ((g - b) / delta).rem_euclid(6.0)
            } else if max == g {
                (b - r) / delta + 2.0
            } else {
                (r - g) / delta + 4.0
            };
            let theta = hue6 / 6.0 * std::f64::consts::TAU;
            let radius = collapse_value(max, k as f64) * sat;
            hv[[0, y, x]] = (radius * theta.cos()) as f32;
            hv[[1, y, x]] = (radius * theta.sin()) as f32;
        }
    }
    Ok(HviImage { hv, intensity, k })
}

/// Inverse of [`rgb_to_hvi`] for the `k` stored in the image.
pub fn hvi_to_rgb(hvi: &HviImage) -> Result<ImageTensor> {
    check_k(hvi.k)?;
    if hvi.hv.shape()[0] != 2 || hvi.intensity.shape()[0] != 1 {
        return Err(Error::shape("HVI image must carry 2 hv + 1 intensity channels"));
    }
    if hvi.hv.shape()[1..] != hvi.intensity.shape()[1..] {
        return Err(Error::shape("hv and intensity spatial dims differ"));
    }
    let (h, w) = (hvi.height(), hvi.width());
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let hh = hvi.hv[[0, y, x]] as f64;
            let vv = hvi.hv[[1, y, x]] as f64;
            let i = (hvi.intensity[[0, y, x]] as f64).clamp(0.0, 1.0);
            let radius = (hh * hh + vv * vv).sqrt();
            let ci = collapse_value(i, hvi.k as f64);
            let sat = if ci > 0.0 { (radius / ci).min(1.0) } else { 0.0 };
            let theta = vv.atan2(hh);
            let hue6 = (theta / std::f64::consts::TAU * 6.0).rem_euclid(6.0);
            let (r, g, b) = hsv_to_rgb(hue6, sat, i);
            out[[0, y, x]] = r as f32;
            out[[1, y, x]] = g as f32;
            out[[2, y, x]] = b as f32;
        }
    }
    Ok(ImageTensor::unchecked(out, ValueRange::UNIT))
}

/// `hue6` in [0,6), saturation and value in [0,1].
fn hsv_to_rgb(hue6: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let x = c * (1.0 - ((hue6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match hue6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Gamma-warped copies of `img`, one per exponent.
///
/// The default `(2.0, 1.0, 0.5)` produces under-, normal- and over-exposed
/// views of a [0,1] image.
pub fn make_virtual_exposures(img: &ImageTensor, gammas: &[f32]) -> Result<Vec<ImageTensor>> {
    img_in_unit(img)?;
    let mut out = Vec::with_capacity(gammas.len());
    for &g in gammas {
        if !(g > 0.0) || !g.is_finite() {
            return Err(Error::domain(format!("exposure gamma must be > 0, got {g}")));
        }
        let data = if g == 1.0 {
            img.data.clone()
        } else {
            img.data.mapv(|v| (v as f64).powf(g as f64) as f32)
        };
        out.push(ImageTensor::unchecked(data, ValueRange::UNIT));
    }
    Ok(out)
}

/// Default virtual-exposure exponents: under, normal, over.
pub const DEFAULT_EXPOSURE_GAMMAS: [f32; 3] = [2.0, 1.0, 0.5];
