//! Differentiable HVI -> RGB conversion used as the output stage of
//! HVI-space models, so losses computed in RGB can reach the parameters.
//!
//! Input planes are `(N, 3, H, W)` = (h, v, intensity). Intensity is clamped
//! to [0,1] and the chroma radius to the collapsed-intensity disc; clamped
//! pixels receive zero gradient in the clamped direction.

use ndarray::Array4;

use crate::colorspace::collapse_value;

const EPS: f64 = 1e-12;

/// Per-pixel forward shared with the backward pass.
///
/// Returns (r, g, b) plus the intermediates needed for gradients.
#[derive(Debug, Clone, Copy)]
struct PixelFwd {
    rgb: [f64; 3],
    // Dependencies of (hi, mid, lo) on (h, v, i); see `pixel_bwd`.
    achromatic: bool,
    value: f64,
    chroma: f64,
    weight: f64,
    sat_clamped: bool,
    i_clamped: bool,
    radius: f64,
    collapsed: f64,
    dcollapse_di: f64,
    sector: usize,
    hue6: f64,
}

fn pixel_fwd(h: f64, v: f64, i_raw: f64, k: f64) -> PixelFwd {
    let i_clamped = !(0.0..=1.0).contains(&i_raw);
    let value = i_raw.clamp(0.0, 1.0);
    let radius = (h * h + v * v).sqrt();
    let collapsed = collapse_value(value, k);
    // d/dI sin(pi I/2)^(1/k); guarded near I=0 where it can blow up.
    let s = (std::f64::consts::FRAC_PI_2 * value).sin();
    let dcollapse_di = if s > 1e-6 {
        (1.0 / k)
            * s.powf(1.0 / k - 1.0)
            * (std::f64::consts::FRAC_PI_2 * value).cos()
            * std::f64::consts::FRAC_PI_2
    } else {
        0.0
    };
    if radius < EPS || collapsed < EPS {
        return PixelFwd {
            rgb: [value; 3],
            achromatic: true,
            value,
            chroma: 0.0,
            weight: 0.0,
            sat_clamped: false,
            i_clamped,
            radius,
            collapsed,
            dcollapse_di,
            sector: 0,
            hue6: 0.0,
        };
    }
    let sat_raw = radius / collapsed;
    let sat_clamped = sat_raw >= 1.0;
    let sat = sat_raw.min(1.0);
    let theta = v.atan2(h);
    let hue6 = (theta / std::f64::consts::TAU * 6.0).rem_euclid(6.0);
    let weight = 1.0 - ((hue6 % 2.0) - 1.0).abs();
    let chroma = value * sat;
    let hi = value;
    let mid = value - chroma * (1.0 - weight);
    let lo = value - chroma;
    let sector = (hue6 as usize).min(5);
    let rgb = match sector {
        0 => [hi, mid, lo],
        1 => [mid, hi, lo],
        2 => [lo, hi, mid],
        3 => [lo, mid, hi],
        4 => [mid, lo, hi],
        _ => [hi, lo, mid],
    };
    PixelFwd {
        rgb,
        achromatic: false,
        value,
        chroma,
        weight,
        sat_clamped,
        i_clamped,
        radius,
        collapsed,
        dcollapse_di,
        sector,
        hue6,
    }
}

/// dL/d(h, v, i) for one pixel given dL/d(r, g, b).
fn pixel_bwd(h: f64, v: f64, fwd: &PixelFwd, g: [f64; 3]) -> [f64; 3] {
    let dv_di = if fwd.i_clamped { 0.0 } else { 1.0 };
    if fwd.achromatic {
        let gi: f64 = g.iter().sum::<f64>() * dv_di;
        return [0.0, 0.0, gi];
    }
    let sat = fwd.chroma / fwd.value.max(EPS);
    // Saturation partials (zero when the radius clamp is active).
    let (ds_dh, ds_dv, ds_di) = if fwd.sat_clamped {
        (0.0, 0.0, 0.0)
    } else {
        (
            h / (fwd.radius * fwd.collapsed),
            v / (fwd.radius * fwd.collapsed),
            -fwd.radius * fwd.dcollapse_di / (fwd.collapsed * fwd.collapsed),
        )
    };
    // Hue partials through atan2.
    let r2 = fwd.radius * fwd.radius;
    let dhue_dh = 6.0 / std::f64::consts::TAU * (-v / r2);
    let dhue_dv = 6.0 / std::f64::consts::TAU * (h / r2);
    let dw_dhue = if fwd.hue6 % 2.0 < 1.0 { 1.0 } else { -1.0 };

    // chroma = V * S
    let dc = |ds: f64, dvv: f64| fwd.value * ds + sat * dvv;
    let dc_dh = dc(ds_dh, 0.0);
    let dc_dv = dc(ds_dv, 0.0);
    let dc_di = dc(ds_di, dv_di);

    // hi = V; mid = V - C(1-w); lo = V - C
    let one_m_w = 1.0 - fwd.weight;
    let dmid = |dvv: f64, dcc: f64, dhue: f64| {
        dvv - one_m_w * dcc + fwd.chroma * dw_dhue * dhue
    };
    let dhi = [0.0, 0.0, dv_di];
    let dmid_v = [
        dmid(0.0, dc_dh, dhue_dh),
        dmid(0.0, dc_dv, dhue_dv),
        dmid(dv_di, dc_di, 0.0),
    ];
    let dlo = [-dc_dh, -dc_dv, dv_di - dc_di];

    // Route (hi, mid, lo) to (r, g, b) per sector.
    let (g_hi, g_mid, g_lo) = match fwd.sector {
        0 => (g[0], g[1], g[2]),
        1 => (g[1], g[0], g[2]),
        2 => (g[1], g[2], g[0]),
        3 => (g[2], g[1], g[0]),
        4 => (g[2], g[0], g[1]),
        _ => (g[0], g[2], g[1]),
    };
    [
        g_hi * dhi[0] + g_mid * dmid_v[0] + g_lo * dlo[0],
        g_hi * dhi[1] + g_mid * dmid_v[1] + g_lo * dlo[1],
        g_hi * dhi[2] + g_mid * dmid_v[2] + g_lo * dlo[2],
    ]
}

/// Batched HVI planes `(N,3,H,W)` -> RGB `(N,3,H,W)`.
pub fn hvi_to_rgb_fwd(planes: &Array4<f32>, k: f32) -> Array4<f32> {
    let (n, c, h, w) = (
        planes.shape()[0],
        planes.shape()[1],
        planes.shape()[2],
        planes.shape()[3],
    );
    assert_eq!(c, 3, "hvi planes must have 3 channels");
    let mut out = Array4::<f32>::zeros((n, 3, h, w));
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let f = pixel_fwd(
                    planes[[ni, 0, y, x]] as f64,
                    planes[[ni, 1, y, x]] as f64,
                    planes[[ni, 2, y, x]] as f64,
                    k as f64,
                );
                for ch in 0..3 {
                    out[[ni, ch, y, x]] = f.rgb[ch] as f32;
                }
            }
        }
    }
    out
}

/// Gradient of [`hvi_to_rgb_fwd`] w.r.t. the HVI planes.
pub fn hvi_to_rgb_bwd(planes: &Array4<f32>, dy: &Array4<f32>, k: f32) -> Array4<f32> {
    let (n, _, h, w) = (
        planes.shape()[0],
        planes.shape()[1],
        planes.shape()[2],
        planes.shape()[3],
    );
    let mut dx = Array4::<f32>::zeros(planes.raw_dim());
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let hh = planes[[ni, 0, y, x]] as f64;
                let vv = planes[[ni, 1, y, x]] as f64;
                let ii = planes[[ni, 2, y, x]] as f64;
                let f = pixel_fwd(hh, vv, ii, k as f64);
                let g = [
                    dy[[ni, 0, y, x]] as f64,
                    dy[[ni, 1, y, x]] as f64,
                    dy[[ni, 2, y, x]] as f64,
                ];
                let d = pixel_bwd(hh, vv, &f, g);
                dx[[ni, 0, y, x]] = d[0] as f32;
                dx[[ni, 1, y, x]] = d[1] as f32;
                dx[[ni, 2, y, x]] = d[2] as f32;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::rgb_to_hvi;
    use crate::image::ImageTensor;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn hvi_planes(seed: u64, k: f32, h: usize, w: usize) -> Array4<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let img = ImageTensor::unit(Array3::from_shape_simple_fn((3, h, w), || {
            rng.gen_range(0.05..0.95)
        }))
        .unwrap();
        let hvi = rgb_to_hvi(&img, k).unwrap();
        hvi.to_planes().insert_axis(ndarray::Axis(0))
    }

    #[test]
    fn matches_reference_inverse() {
        let k = 1.3f32;
        let planes = hvi_planes(5, k, 8, 8);
        let rgb = hvi_to_rgb_fwd(&planes, k);
        let hvi = crate::colorspace::HviImage::from_planes(
            &planes.index_axis(ndarray::Axis(0), 0).to_owned(),
            k,
        )
        .unwrap();
        let expect = crate::colorspace::hvi_to_rgb(&hvi).unwrap();
        let err = (&rgb.index_axis(ndarray::Axis(0), 0).to_owned() - &expect.data)
            .iter()
            .fold(0f32, |m, d| m.max(d.abs()));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gradient_matches_fd_away_from_kinks() {
        let k = 1.0f32;
        let planes = hvi_planes(9, k, 6, 6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let dy = Array4::from_shape_simple_fn(planes.raw_dim(), || rng.gen_range(-1.0..1.0f32));
        let dx = hvi_to_rgb_bwd(&planes, &dy, k);
        let loss = |p: &Array4<f32>| -> f64 {
            hvi_to_rgb_fwd(p, k)
                .iter()
                .zip(dy.iter())
                .map(|(o, g)| *o as f64 * *g as f64)
                .sum()
        };
        let h = 1e-4f32;
        let mut checked = 0;
        let mut ok = 0;
        for ch in 0..3 {
            for y in 0..6 {
                for x in 0..6 {
                    // Skip pixels where the piecewise form has a kink: FD is
                    // meaningless at sector boundaries and active clamps.
                    let f = pixel_fwd(
                        planes[[0, 0, y, x]] as f64,
                        planes[[0, 1, y, x]] as f64,
                        planes[[0, 2, y, x]] as f64,
                        k as f64,
                    );
                    let frac = f.hue6.fract().min(1.0 - f.hue6.fract());
                    if f.achromatic || f.sat_clamped || frac < 0.02 {
                        continue;
                    }
                    let mut pp = planes.clone();
                    pp[[0, ch, y, x]] += h;
                    let mut pm = planes.clone();
                    pm[[0, ch, y, x]] -= h;
                    let fd = (loss(&pp) - loss(&pm)) / (2.0 * h as f64);
                    let an = dx[[0, ch, y, x]] as f64;
                    checked += 1;
                    if (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3) < 2e-2 {
                        ok += 1;
                    }
                }
            }
        }
        assert!(checked > 30, "too few checkable coordinates: {checked}");
        assert!(
            ok as f64 >= checked as f64 * 0.97,
            "{ok}/{checked} gradient checks passed"
        );
    }
}
