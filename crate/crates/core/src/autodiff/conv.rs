//! Convolution kernels for the tape: an im2col + GEMM implementation and a
//! naive direct implementation kept as an independent reference.
//!
//! All convolutions are "same"-padded with zeros: `pad = (k - 1) / 2` per
//! side, output spatial dims `(H + 2p - k) / stride + 1`.

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rayon::prelude::*;

/// Output spatial size for a same-padded convolution.
pub fn out_dim(input: usize, k: usize, stride: usize) -> usize {
    (input + (k - 1) - k) / stride + 1
}

/// GEMM with deterministic column-chunk parallelism.
fn par_matmul(a: &ArrayView2<f32>, b: &ArrayView2<f32>, out: &mut ArrayViewMut2<f32>) {
    let cols = b.shape()[1];
    let threads = rayon::current_num_threads();
    if threads <= 1 || cols < 2048 {
        general_mat_mul(1.0, a, b, 0.0, out);
        return;
    }
    let chunk = cols.div_ceil(threads);
    let b_chunks: Vec<ArrayView2<f32>> = b.axis_chunks_iter(Axis(1), chunk).collect();
    let o_chunks: Vec<ArrayViewMut2<f32>> = out.axis_chunks_iter_mut(Axis(1), chunk).collect();
    b_chunks
        .into_par_iter()
        .zip(o_chunks)
        .for_each(|(bc, mut oc)| {
            general_mat_mul(1.0, a, &bc, 0.0, &mut oc);
        });
}

/// Unrolls one group of one sample into a `(cg*kh*kw, ho*wo)` matrix.
fn im2col(
    x: &Array4<f32>,
    n: usize,
    c0: usize,
    cg: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Array2<f32> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let (ho, wo) = (out_dim(h, kh, stride), out_dim(w, kw, stride));
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut cols = Array2::<f32>::zeros((cg * kh * kw, ho * wo));
    for ci in 0..cg {
        let plane = x.index_axis(Axis(0), n);
        let plane = plane.index_axis(Axis(0), c0 + ci);
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let mut out_row = cols.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + i) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + j) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * wo + ox] = plane[[iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back into `dx`.
fn col2im_add(
    dcols: &Array2<f32>,
    dx: &mut Array4<f32>,
    n: usize,
    c0: usize,
    cg: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) {
    let (h, w) = (dx.shape()[2], dx.shape()[3]);
    let (ho, wo) = (out_dim(h, kh, stride), out_dim(w, kw, stride));
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    for ci in 0..cg {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let drow = dcols.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + i) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + j) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[n, c0 + ci, iy as usize, ix as usize]] += drow[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Same-padded grouped convolution, `w` of shape `(cout, cin/groups, kh, kw)`.
pub fn conv2d_fwd(
    x: &Array4<f32>,
    w: &Array4<f32>,
    b: Option<&Array1<f32>>,
    stride: usize,
    groups: usize,
) -> Array4<f32> {
    let (n, cin, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, cg * groups, "conv2d channel/group mismatch");
    assert_eq!(cout % groups, 0, "conv2d cout must divide by groups");
    let outg = cout / groups;
    let (ho, wo) = (out_dim(h, kh, stride), out_dim(ww, kw, stride));
    let mut y = Array4::<f32>::zeros((n, cout, ho, wo));
    let w_flat = w
        .view()
        .into_shape_with_order((cout, cg * kh * kw))
        .expect("contiguous conv weights");
    for ni in 0..n {
        for g in 0..groups {
            let cols = im2col(x, ni, g * cg, cg, kh, kw, stride);
            let wg = w_flat.slice(ndarray::s![g * outg..(g + 1) * outg, ..]);
            let mut out = y.slice_mut(ndarray::s![ni, g * outg..(g + 1) * outg, .., ..]);
            let mut out2 = out
                .view_mut()
                .into_shape_with_order((outg, ho * wo))
                .expect("contiguous output");
            par_matmul(&wg, &cols.view(), &mut out2);
        }
    }
    if let Some(bias) = b {
        for ni in 0..n {
            for c in 0..cout {
                y.slice_mut(ndarray::s![ni, c, .., ..]).mapv_inplace(|v| v + bias[c]);
            }
        }
    }
    y
}

/// Gradients of [`conv2d_fwd`] w.r.t. input, weights and bias.
pub fn conv2d_bwd(
    x: &Array4<f32>,
    w: &Array4<f32>,
    dy: &Array4<f32>,
    stride: usize,
    groups: usize,
    need_dx: bool,
) -> (Option<Array4<f32>>, Array4<f32>, Array1<f32>) {
    let (n, _cin, _h, _w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let outg = cout / groups;
    let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
    let mut dw = Array4::<f32>::zeros(w.raw_dim());
    let mut db = Array1::<f32>::zeros(cout);
    let mut dx = need_dx.then(|| Array4::<f32>::zeros(x.raw_dim()));

    let mut dw_flat = dw
        .view_mut()
        .into_shape_with_order((cout, cg * kh * kw))
        .expect("contiguous dw");
    let w_flat = w
        .view()
        .into_shape_with_order((cout, cg * kh * kw))
        .expect("contiguous conv weights");

    for ni in 0..n {
        for g in 0..groups {
            let cols = im2col(x, ni, g * cg, cg, kh, kw, stride);
            let dyg = dy.slice(ndarray::s![ni, g * outg..(g + 1) * outg, .., ..]);
            let dyg2 = dyg
                .into_shape_with_order((outg, ho * wo))
                .expect("contiguous dy");
            // dW += dy . cols^T
            let mut dwg = dw_flat.slice_mut(ndarray::s![g * outg..(g + 1) * outg, ..]);
            general_mat_mul(1.0, &dyg2, &cols.t(), 1.0, &mut dwg);
            if let Some(dx) = dx.as_mut() {
                // dcols = w^T . dy, scattered back to input positions
                let wg = w_flat.slice(ndarray::s![g * outg..(g + 1) * outg, ..]);
                let mut dcols = Array2::<f32>::zeros((cg * kh * kw, ho * wo));
                par_matmul(&wg.t(), &dyg2, &mut dcols.view_mut());
                col2im_add(&dcols, dx, ni, g * cg, cg, kh, kw, stride);
            }
        }
        for c in 0..cout {
            let mut acc = 0f64;
            for v in dy.slice(ndarray::s![ni, c, .., ..]).iter() {
                acc += *v as f64;
            }
            db[c] += acc as f32;
        }
    }
    (dx, dw, db)
}

/// Direct-loop reference convolution; slow but obviously correct.
pub fn conv2d_naive(
    x: &Array4<f32>,
    w: &Array4<f32>,
    b: Option<&Array1<f32>>,
    stride: usize,
    groups: usize,
) -> Array4<f32> {
    let (n, cin, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, cg * groups);
    let outg = cout / groups;
    let (ho, wo) = (out_dim(h, kh, stride), out_dim(ww, kw, stride));
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut y = Array4::<f32>::zeros((n, cout, ho, wo));
    for ni in 0..n {
        for co in 0..cout {
            let g = co / outg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map(|b| b[co]).unwrap_or(0.0) as f64;
                    for ci in 0..cg {
                        for i in 0..kh {
                            let iy = (oy * stride + i) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for j in 0..kw {
                                let ix = (ox * stride + j) as isize - pw as isize;
                                if ix < 0 || ix >= ww as isize {
                                    continue;
                                }
                                acc += (x[[ni, g * cg + ci, iy as usize, ix as usize]]
                                    * w[[co, ci, i, j]]) as f64;
                            }
                        }
                    }
                    y[[ni, co, oy, ox]] = acc as f32;
                }
            }
        }
    }
    y
}
