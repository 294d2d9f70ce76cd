//! FFT-backed tape ops: amplitude spectra and phase transfer.
//!
//! Forward 2-D transforms are unnormalized; inverses divide by `H*W`.
//! Gradients are derived through the real/imaginary parts and verified
//! against finite differences in the tape tests.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};

thread_local! {
    static PLANS: std::cell::RefCell<HashMap<(usize, bool), Arc<dyn Fft<f32>>>> =
        std::cell::RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f32>> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                planner.plan_fft(
                    len,
                    if inverse {
                        FftDirection::Inverse
                    } else {
                        FftDirection::Forward
                    },
                )
            })
            .clone()
    })
}

fn transform_2d(data: &mut Array2<Complex<f32>>, inverse: bool) {
    let (h, w) = (data.shape()[0], data.shape()[1]);
    let row_fft = plan(w, inverse);
    let mut scratch = vec![Complex::default(); row_fft.get_inplace_scratch_len()];
    for mut row in data.rows_mut() {
        let slice = row.as_slice_mut().expect("contiguous row");
        row_fft.process_with_scratch(slice, &mut scratch);
    }
    let col_fft = plan(h, inverse);
    let mut scratch = vec![Complex::default(); col_fft.get_inplace_scratch_len()];
    let mut col = vec![Complex::default(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[[y, x]];
        }
        col_fft.process_with_scratch(&mut col, &mut scratch);
        for y in 0..h {
            data[[y, x]] = col[y];
        }
    }
}

/// Unnormalized 2-D FFT of a real plane.
pub fn fft2(plane: &Array2<f32>) -> Array2<Complex<f32>> {
    let mut data = plane.mapv(|v| Complex::new(v, 0.0));
    transform_2d(&mut data, false);
    data
}

/// Unnormalized inverse 2-D FFT (no 1/(HW) factor).
pub fn ifft2_unnorm(spec: &Array2<Complex<f32>>) -> Array2<Complex<f32>> {
    let mut data = spec.clone();
    transform_2d(&mut data, true);
    data
}

/// Amplitude spectrum of a real plane.
pub fn amplitude(plane: &Array2<f32>) -> Array2<f32> {
    fft2(plane).mapv(|c| c.norm())
}

/// Gradient of `sum(dy * |FFT2(x)|)` w.r.t. `x`.
pub fn amplitude_bwd(plane: &Array2<f32>, dy: &Array2<f32>, eps: f32) -> Array2<f32> {
    let spec = fft2(plane);
    let mut g = Array2::<Complex<f32>>::zeros(spec.raw_dim());
    for ((gv, s), d) in g.iter_mut().zip(spec.iter()).zip(dy.iter()) {
        let m = s.norm();
        if m > eps {
            *gv = Complex::new(d * s.re / m, d * s.im / m);
        }
    }
    ifft2_unnorm(&g).mapv(|c| c.re)
}

/// Bins with amplitude below this inherit the other operand's phase.
pub const PHASE_EPS: f32 = 1e-8;

/// Recombines the amplitude of `amp_src` with the phase of `phase_src`.
pub fn phase_transfer_fwd(amp_src: &Array2<f32>, phase_src: &Array2<f32>) -> Array2<f32> {
    let fa = fft2(amp_src);
    let fb = fft2(phase_src);
    let n = (amp_src.len()) as f32;
    let mut spec = Array2::<Complex<f32>>::zeros(fa.raw_dim());
    for ((s, a), b) in spec.iter_mut().zip(fa.iter()).zip(fb.iter()) {
        let m = a.norm();
        let phase = if b.norm() > PHASE_EPS {
            b.arg()
        } else {
            a.arg()
        };
        *s = Complex::from_polar(m, phase);
    }
    ifft2_unnorm(&spec).mapv(|c| c.re / n)
}

/// Gradients of [`phase_transfer_fwd`] w.r.t. both inputs.
///
/// In phase-undefined bins (|FFT(phase_src)| <= eps) the inherited phase is
/// treated as constant, so no gradient flows through it.
pub fn phase_transfer_bwd(
    amp_src: &Array2<f32>,
    phase_src: &Array2<f32>,
    dy: &Array2<f32>,
) -> (Array2<f32>, Array2<f32>) {
    let fa = fft2(amp_src);
    let fb = fft2(phase_src);
    let n = amp_src.len() as f32;

    // dL/d(spectrum) with (re, im) = (dL/ds_r, dL/ds_i).
    let gs = fft2(dy).mapv(|c| c / n);

    let mut ga = Array2::<Complex<f32>>::zeros(fa.raw_dim());
    let mut gb = Array2::<Complex<f32>>::zeros(fb.raw_dim());
    for (((gav, gbv), (a, b)), g) in ga
        .iter_mut()
        .zip(gb.iter_mut())
        .zip(fa.iter().zip(fb.iter()))
        .zip(gs.iter())
    {
        let m = a.norm();
        let mb2 = b.norm_sqr();
        let phase = if mb2.sqrt() > PHASE_EPS { b.arg() } else { a.arg() };
        let (sin_p, cos_p) = phase.sin_cos();
        let dl_dm = g.re * cos_p + g.im * sin_p;
        if m > PHASE_EPS {
            *gav = Complex::new(dl_dm * a.re / m, dl_dm * a.im / m);
        }
        if mb2.sqrt() > PHASE_EPS {
            let dl_dphase = m * (-g.re * sin_p + g.im * cos_p);
            *gbv = Complex::new(-dl_dphase * b.im / mb2, dl_dphase * b.re / mb2);
        }
    }
    let da = ifft2_unnorm(&ga).mapv(|c| c.re);
    let db = ifft2_unnorm(&gb).mapv(|c| c.re);
    (da, db)
}
