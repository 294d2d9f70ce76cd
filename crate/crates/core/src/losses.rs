//! The composite loss menu: pixel, structural, color, exposure, frequency,
//! edge and perceptual terms as named weighted combinations with verified
//! gradients. All terms are built on the autodiff tape; a convenience value
//! API evaluates them without a backward pass.

use ndarray::{Array4, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::autodiff::{Ax, Tape, Var};
use crate::error::{Error, Result};

/// SSIM stabilizers on the [0,1] range: `(0.01)^2` and `(0.03)^2`.
pub const SSIM_C1: f32 = 1e-4;
pub const SSIM_C2: f32 = 9e-4;
/// Gaussian window width and sigma used by SSIM terms and metrics.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Canonical 5-scale MS-SSIM weights.
pub const MS_SSIM_WEIGHTS: [f32; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Normalized 1-D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn gaussian_kernel_2d(channels: usize) -> Ax {
    let w1 = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut k = Ax::zeros(IxDyn(&[channels, 1, SSIM_WINDOW, SSIM_WINDOW]));
    for c in 0..channels {
        for i in 0..SSIM_WINDOW {
            for j in 0..SSIM_WINDOW {
                k[IxDyn(&[c, 0, i, j])] = (w1[i] * w1[j]) as f32;
            }
        }
    }
    k
}

fn check_pair(tape: &Tape, pred: Var, gt: Var) -> Result<(usize, usize, usize, usize)> {
    let p = tape.shape(pred);
    let g = tape.shape(gt);
    if p != g {
        return Err(Error::shape(format!("loss shape mismatch: {p:?} vs {g:?}")));
    }
    if p.len() != 4 {
        return Err(Error::shape(format!("losses expect (N,C,H,W), got {p:?}")));
    }
    Ok((p[0], p[1], p[2], p[3]))
}

/// Mean absolute difference.
pub fn l1_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    check_pair(tape, pred, gt)?;
    let d = tape.sub(pred, gt);
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// `mean sqrt(d^2 + eps^2) - eps`, zero at pred == gt.
pub fn charbonnier_loss(tape: &mut Tape, pred: Var, gt: Var, eps: f32) -> Result<Var> {
    check_pair(tape, pred, gt)?;
    let d = tape.sub(pred, gt);
    let sq = tape.mul(d, d);
    let sq = tape.add_scalar(sq, eps * eps);
    let r = tape.sqrt(sq);
    let m = tape.mean(r);
    Ok(tape.add_scalar(m, -eps))
}

/// Gaussian-blurred plane restricted to the valid (unpadded) region.
fn blur_valid(tape: &mut Tape, x: Var, channels: usize, h: usize, w: usize) -> Var {
    let k = tape.leaf(gaussian_kernel_2d(channels));
    let b = tape.conv2d(x, k, None, 1, channels);
    let half = SSIM_WINDOW / 2;
    let b = tape.slice_axis(b, 2, half, h - half);
    tape.slice_axis(b, 3, half, w - half)
}

/// SSIM map components over valid windows: (luminance term, cs term).
fn ssim_terms(tape: &mut Tape, pred: Var, gt: Var) -> Result<(Var, Var)> {
    let (_, c, h, w) = check_pair(tape, pred, gt)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "image {h}x{w} smaller than the SSIM window {SSIM_WINDOW}"
        )));
    }
    let mu_x = blur_valid(tape, pred, c, h, w);
    let mu_y = blur_valid(tape, gt, c, h, w);
    let xx = tape.mul(pred, pred);
    let yy = tape.mul(gt, gt);
    let xy = tape.mul(pred, gt);
    let xx_b = blur_valid(tape, xx, c, h, w);
    let yy_b = blur_valid(tape, yy, c, h, w);
    let xy_b = blur_valid(tape, xy, c, h, w);
    let mu_x2 = tape.mul(mu_x, mu_x);
    let mu_y2 = tape.mul(mu_y, mu_y);
    let mu_xy = tape.mul(mu_x, mu_y);
    let var_x = tape.sub(xx_b, mu_x2);
    let var_y = tape.sub(yy_b, mu_y2);
    let cov = tape.sub(xy_b, mu_xy);

    let lum_num = tape.scale(mu_xy, 2.0);
    let lum_num = tape.add_scalar(lum_num, SSIM_C1);
    let lum_den = tape.add(mu_x2, mu_y2);
    let lum_den = tape.add_scalar(lum_den, SSIM_C1);
    let lum = tape.div(lum_num, lum_den);

    let cs_num = tape.scale(cov, 2.0);
    let cs_num = tape.add_scalar(cs_num, SSIM_C2);
    let cs_den = tape.add(var_x, var_y);
    let cs_den = tape.add_scalar(cs_den, SSIM_C2);
    let cs = tape.div(cs_num, cs_den);
    Ok((lum, cs))
}

/// Differentiable mean SSIM over Gaussian windows (valid region).
pub fn ssim_index(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let (lum, cs) = ssim_terms(tape, pred, gt)?;
    let map = tape.mul(lum, cs);
    Ok(tape.mean(map))
}

/// `1 - SSIM`.
pub fn ssim_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let s = ssim_index(tape, pred, gt)?;
    let n = tape.neg(s);
    Ok(tape.add_scalar(n, 1.0))
}

/// `1 - MS-SSIM` with the canonical scale weights (renormalized when fewer
/// than five scales are used). Negative contrast terms are floored at a
/// small epsilon before the fractional power.
pub fn ms_ssim_loss(tape: &mut Tape, pred: Var, gt: Var, scales: usize) -> Result<Var> {
    let (_, _, h, w) = check_pair(tape, pred, gt)?;
    if scales == 0 || scales > 5 {
        return Err(Error::config(format!("ms-ssim scales {scales} outside 1..=5")));
    }
    let need = SSIM_WINDOW << (scales - 1);
    if h < need || w < need {
        return Err(Error::config(format!(
            "image {h}x{w} smaller than window * 2^(scales-1) = {need}"
        )));
    }
    let wsum: f32 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let mut p = pred;
    let mut g = gt;
    let mut acc: Option<Var> = None;
    for s in 0..scales {
        let weight = MS_SSIM_WEIGHTS[s] / wsum;
        let (lum, cs) = ssim_terms(tape, p, g)?;
        let term = if s + 1 == scales {
            tape.mul(lum, cs)
        } else {
            cs
        };
        let mean = tape.mean(term);
        let wv = tape.leaf(Ax::from_elem(IxDyn(&[1]), weight));
        let powed = tape.pow_elem(mean, wv, 1e-6);
        acc = Some(match acc {
            Some(a) => tape.mul(a, powed),
            None => powed,
        });
        if s + 1 < scales {
            p = tape.avg_pool(p, 2);
            g = tape.avg_pool(g, 2);
        }
    }
    let prod = acc.expect("at least one scale");
    let n = tape.neg(prod);
    Ok(tape.add_scalar(n, 1.0))
}

/// Mean absolute first differences, optionally weighted per pixel.
///
/// The mean divides by the total difference count regardless of weights, so
/// a zero weight map yields zero.
pub fn tv_loss(tape: &mut Tape, pred: Var, weight_map: Option<Var>) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("tv_loss expects (N,C,H,W), got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if let Some(wm) = weight_map {
        let ws = tape.shape(wm);
        if ws[0] != n || ws[1] != 1 || ws[2] != h || ws[3] != w {
            return Err(Error::shape(format!(
                "weight map must be (N,1,H,W), got {ws:?}"
            )));
        }
    }
    let left = tape.slice_axis(pred, 3, 0, w - 1);
    let right = tape.slice_axis(pred, 3, 1, w);
    let dx = tape.sub(right, left);
    let mut dx = tape.abs(dx);
    let top = tape.slice_axis(pred, 2, 0, h - 1);
    let bot = tape.slice_axis(pred, 2, 1, h);
    let dy = tape.sub(bot, top);
    let mut dy = tape.abs(dy);
    if let Some(wm) = weight_map {
        let wx = tape.slice_axis(wm, 3, 0, w - 1);
        dx = tape.mul(dx, wx);
        let wy = tape.slice_axis(wm, 2, 0, h - 1);
        dy = tape.mul(dy, wy);
    }
    let sx = tape.sum(dx);
    let sy = tape.sum(dy);
    let total = tape.add(sx, sy);
    let count = (n * c * (h * (w - 1) + (h - 1) * w)) as f32;
    Ok(tape.scale(total, 1.0 / count))
}

/// Sum over channel pairs of squared mean differences, averaged over the
/// batch. Zero for gray-balanced images.
pub fn color_constancy_loss(tape: &mut Tape, pred: Var) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape(format!(
            "color constancy expects (N,3,H,W), got {shape:?}"
        )));
    }
    let means = tape.mean_axes(pred, &[2, 3]);
    let mut acc: Option<Var> = None;
    for (a, b) in [(0usize, 1usize), (0, 2), (1, 2)] {
        let ma = tape.slice_channels(means, a, a + 1);
        let mb = tape.slice_channels(means, b, b + 1);
        let d = tape.sub(ma, mb);
        let sq = tape.mul(d, d);
        acc = Some(match acc {
            Some(t) => tape.add(t, sq),
            None => sq,
        });
    }
    Ok(tape.mean(acc.expect("three pairs")))
}

const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

fn luma_of(tape: &mut Tape, x: Var) -> Var {
    let w = tape.leaf(Ax::from_shape_vec(IxDyn(&[1, 3, 1, 1]), LUMA_WEIGHTS.to_vec()).unwrap());
    tape.conv2d(x, w, None, 1, 1)
}

/// Mean over non-overlapping patches of squared (patch luma - target).
pub fn exposure_loss(tape: &mut Tape, pred: Var, target_level: f32, patch: usize) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape(format!(
            "exposure loss expects (N,3,H,W), got {shape:?}"
        )));
    }
    if patch == 0 || shape[2] % patch != 0 || shape[3] % patch != 0 {
        return Err(Error::config(format!(
            "patch {patch} must divide image dims {}x{}",
            shape[2], shape[3]
        )));
    }
    let luma = luma_of(tape, pred);
    let pooled = tape.avg_pool(luma, patch);
    let d = tape.add_scalar(pooled, -target_level);
    let sq = tape.mul(d, d);
    Ok(tape.mean(sq))
}

/// Mean L1 between 2-D FFT amplitude spectra (unnormalized DFT).
pub fn frequency_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    check_pair(tape, pred, gt)?;
    let ap = tape.amp_spectrum(pred);
    let ag = tape.amp_spectrum(gt);
    let d = tape.sub(ap, ag);
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

fn sobel_kernels(channels: usize) -> (Ax, Ax) {
    let gx = [-1f32, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy = [-1f32, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let mut kx = Ax::zeros(IxDyn(&[channels, 1, 3, 3]));
    let mut ky = Ax::zeros(IxDyn(&[channels, 1, 3, 3]));
    for c in 0..channels {
        for i in 0..3 {
            for j in 0..3 {
                kx[IxDyn(&[c, 0, i, j])] = gx[i * 3 + j];
                ky[IxDyn(&[c, 0, i, j])] = gy[i * 3 + j];
            }
        }
    }
    (kx, ky)
}

/// Sobel gradient magnitude over the valid region (1px border dropped).
fn sobel_magnitude(tape: &mut Tape, x: Var, c: usize, h: usize, w: usize) -> Var {
    let (kx, ky) = sobel_kernels(c);
    let kx = tape.leaf(kx);
    let ky = tape.leaf(ky);
    let gx = tape.conv2d(x, kx, None, 1, c);
    let gy = tape.conv2d(x, ky, None, 1, c);
    let gx2 = tape.mul(gx, gx);
    let gy2 = tape.mul(gy, gy);
    let s = tape.add(gx2, gy2);
    let s = tape.add_scalar(s, 1e-12);
    let mag = tape.sqrt(s);
    let mag = tape.slice_axis(mag, 2, 1, h - 1);
    tape.slice_axis(mag, 3, 1, w - 1)
}

/// Mean L1 between Sobel gradient magnitudes.
pub fn gradient_edge_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let (_, c, h, w) = check_pair(tape, pred, gt)?;
    if h < 3 || w < 3 {
        return Err(Error::shape("gradient loss needs at least 3x3 images".to_string()));
    }
    let mp = sobel_magnitude(tape, pred, c, h, w);
    let mg = sobel_magnitude(tape, gt, c, h, w);
    let d = tape.sub(mp, mg);
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// L1 on the BT.601 luma channel.
pub fn luma_l1_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let (_, c, _, _) = check_pair(tape, pred, gt)?;
    if c != 3 {
        return Err(Error::shape(format!("luma loss expects 3 channels, got {c}")));
    }
    let lp = luma_of(tape, pred);
    let lg = luma_of(tape, gt);
    let d = tape.sub(lp, lg);
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Multi-level feature extractor for perceptual distances.
pub trait PerceptualBackend {
    fn name(&self) -> &str;
    fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>>;
}

/// Deterministic random-weight convolutional pyramid: a self-contained
/// stand-in for learned feature extractors. Real backends (pretrained
/// networks) plug in through the same trait.
pub struct RandomPyramidBackend {
    layers: Vec<(Ax, Ax)>,
}

impl RandomPyramidBackend {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [(3usize, 16usize), (16, 32), (32, 64)];
        let layers = widths
            .iter()
            .map(|&(i, o)| {
                let bound = (2.0 / (i as f32 * 9.0)).sqrt();
                let w = Ax::from_shape_simple_fn(IxDyn(&[o, i, 3, 3]), || {
                    rng.gen_range(-bound..bound)
                });
                let b = Ax::zeros(IxDyn(&[o]));
                (w, b)
            })
            .collect();
        RandomPyramidBackend { layers }
    }
}

impl Default for RandomPyramidBackend {
    fn default() -> Self {
        RandomPyramidBackend::new(0x5EED)
    }
}

impl PerceptualBackend for RandomPyramidBackend {
    fn name(&self) -> &str {
        "random-pyramid"
    }

    fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::new();
        let mut cur = x;
        for (w, b) in &self.layers {
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            let c = tape.conv2d(cur, wv, Some(bv), 2, 1);
            cur = tape.tanh(c);
            feats.push(cur);
        }
        Ok(feats)
    }
}

fn default_backend() -> &'static RandomPyramidBackend {
    static BACKEND: OnceLock<RandomPyramidBackend> = OnceLock::new();
    BACKEND.get_or_init(RandomPyramidBackend::default)
}

/// Sum over feature levels of mean squared feature distance.
pub fn perceptual_loss(
    tape: &mut Tape,
    pred: Var,
    gt: Var,
    backend: &dyn PerceptualBackend,
) -> Result<Var> {
    check_pair(tape, pred, gt)?;
    let wrap = |e: Error| Error::Backend {
        name: backend.name().to_string(),
        message: e.to_string(),
    };
    let fp = backend.features(tape, pred).map_err(wrap)?;
    let fg = backend.features(tape, gt).map_err(wrap)?;
    if fp.len() != fg.len() || fp.is_empty() {
        return Err(Error::Backend {
            name: backend.name().to_string(),
            message: "backend returned mismatched feature levels".into(),
        });
    }
    let mut acc: Option<Var> = None;
    for (p, g) in fp.into_iter().zip(fg) {
        let d = tape.sub(p, g);
        let sq = tape.mul(d, d);
        let m = tape.mean(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, m),
            None => m,
        });
    }
    Ok(acc.expect("non-empty features"))
}

// ---------------------------------------------------------------------
// named combinations
// ---------------------------------------------------------------------

/// One weighted term of a composite loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    L1,
    Charbonnier { eps: f32 },
    Ssim,
    MsSsim { scales: usize },
    Tv,
    ColorConstancy,
    Exposure { target: f32, patch: usize },
    Frequency,
    GradientEdge,
    Luma,
    Perceptual,
}

impl TermKind {
    pub fn name(&self) -> &'static str {
        match self {
            TermKind::L1 => "l1",
            TermKind::Charbonnier { .. } => "charbonnier",
            TermKind::Ssim => "ssim",
            TermKind::MsSsim { .. } => "ms_ssim",
            TermKind::Tv => "tv",
            TermKind::ColorConstancy => "color",
            TermKind::Exposure { .. } => "exposure",
            TermKind::Frequency => "frequency",
            TermKind::GradientEdge => "grad",
            TermKind::Luma => "luma",
            TermKind::Perceptual => "perceptual",
        }
    }

    fn parse(name: &str) -> Result<TermKind> {
        Ok(match name {
            "l1" => TermKind::L1,
            "charbonnier" => TermKind::Charbonnier { eps: 1e-3 },
            "ssim" => TermKind::Ssim,
            "ms_ssim" => TermKind::MsSsim { scales: 5 },
            "tv" => TermKind::Tv,
            "color" => TermKind::ColorConstancy,
            "exposure" => TermKind::Exposure {
                target: 0.6,
                patch: 16,
            },
            "frequency" => TermKind::Frequency,
            "grad" => TermKind::GradientEdge,
            "luma" => TermKind::Luma,
            "perceptual" => TermKind::Perceptual,
            other => return Err(Error::config(format!("unknown loss term '{other}'"))),
        })
    }
}

/// Named weighted combination of loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub terms: Vec<(TermKind, f32)>,
}

impl LossConfig {
    /// Named presets reproducing published recipes.
    pub fn preset(name: &str) -> Result<LossConfig> {
        let terms = match name {
            // 0.1 * L1 + perceptual
            "s3" => vec![(TermKind::L1, 0.1), (TermKind::Perceptual, 1.0)],
            // 0.75 * SSIM + 0.20 * L1 + 0.05 * grad
            "kletech" => vec![
                (TermKind::Ssim, 0.75),
                (TermKind::L1, 0.20),
                (TermKind::GradientEdge, 0.05),
            ],
            // L1 + SSIM + perceptual + 0.03 color + 0.15 luma + 0.05 edge
            "sun" => vec![
                (TermKind::L1, 1.0),
                (TermKind::Ssim, 1.0),
                (TermKind::Perceptual, 1.0),
                (TermKind::ColorConstancy, 0.03),
                (TermKind::Luma, 0.15),
                (TermKind::GradientEdge, 0.05),
            ],
            other => {
                return Err(Error::config(format!(
                    "unknown loss preset '{other}' (expected s3, kletech or sun)"
                )))
            }
        };
        Ok(LossConfig { terms })
    }

    /// Parses either a preset name or a custom `term:weight,term:weight`
    /// list, e.g. `"l1:0.2,ssim:0.75"`.
    pub fn parse(text: &str) -> Result<LossConfig> {
        if !text.contains(':') {
            return LossConfig::preset(text);
        }
        let mut terms = Vec::new();
        for part in text.split(',') {
            let (name, weight) = part
                .split_once(':')
                .ok_or_else(|| Error::config(format!("bad loss term '{part}'")))?;
            let weight: f32 = weight
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad loss weight in '{part}'")))?;
            if weight < 0.0 {
                return Err(Error::config(format!("negative loss weight in '{part}'")));
            }
            terms.push((TermKind::parse(name.trim())?, weight));
        }
        if terms.is_empty() {
            return Err(Error::config("loss config needs at least one term"));
        }
        Ok(LossConfig { terms })
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::config("loss config needs at least one term"));
        }
        if self.terms.iter().any(|(_, w)| *w < 0.0 || !w.is_finite()) {
            return Err(Error::config("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Evaluates one term on the tape.
pub fn loss_term(
    tape: &mut Tape,
    kind: &TermKind,
    pred: Var,
    gt: Var,
    backend: &dyn PerceptualBackend,
) -> Result<Var> {
    match kind {
        TermKind::L1 => l1_loss(tape, pred, gt),
        TermKind::Charbonnier { eps } => charbonnier_loss(tape, pred, gt, *eps),
        TermKind::Ssim => ssim_loss(tape, pred, gt),
        TermKind::MsSsim { scales } => ms_ssim_loss(tape, pred, gt, *scales),
        TermKind::Tv => tv_loss(tape, pred, None),
        TermKind::ColorConstancy => color_constancy_loss(tape, pred),
        TermKind::Exposure { target, patch } => exposure_loss(tape, pred, *target, *patch),
        TermKind::Frequency => frequency_loss(tape, pred, gt),
        TermKind::GradientEdge => gradient_edge_loss(tape, pred, gt),
        TermKind::Luma => luma_l1_loss(tape, pred, gt),
        TermKind::Perceptual => perceptual_loss(tape, pred, gt, backend),
    }
}

/// Weighted sum of the configured terms plus a per-term breakdown
/// (unweighted values) for logging.
pub fn composite_loss(
    tape: &mut Tape,
    cfg: &LossConfig,
    pred: Var,
    gt: Var,
    backend: &dyn PerceptualBackend,
) -> Result<(Var, Vec<(String, f64)>)> {
    cfg.validate()?;
    let mut breakdown = Vec::with_capacity(cfg.terms.len());
    let mut acc: Option<Var> = None;
    for (kind, weight) in &cfg.terms {
        let t = loss_term(tape, kind, pred, gt, backend)?;
        breakdown.push((kind.name().to_string(), tape.scalar64(t)));
        let wt = tape.scale(t, *weight);
        acc = Some(match acc {
            Some(a) => tape.add(a, wt),
            None => wt,
        });
    }
    Ok((acc.expect("at least one term"), breakdown))
}

/// Value-only evaluation of a composite loss (no backward pass).
pub fn loss_value(
    cfg: &LossConfig,
    pred: &Array4<f32>,
    gt: &Array4<f32>,
) -> Result<(f64, Vec<(String, f64)>)> {
    let mut tape = Tape::new();
    let p = tape.leaf(pred.clone().into_dyn());
    let g = tape.leaf(gt.clone().into_dyn());
    let (total, breakdown) = composite_loss(&mut tape, cfg, p, g, default_backend())?;
    Ok((tape.scalar64(total), breakdown))
}

/// Value-only evaluation of one term.
pub fn term_value(kind: &TermKind, pred: &Array4<f32>, gt: &Array4<f32>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(pred.clone().into_dyn());
    let g = tape.leaf(gt.clone().into_dyn());
    let t = loss_term(&mut tape, kind, p, g, default_backend())?;
    Ok(tape.scalar64(t))
}
