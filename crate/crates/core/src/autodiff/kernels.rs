//! Dense f64 kernels behind the tape ops: stride-1 grouped convolution,
//! pixel shuffle, bilinear resampling. Forward and both backward directions
//! are written as plain gather loops; every parallel unit owns a disjoint
//! output slice, so results are bit-deterministic regardless of thread count.

use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;

pub fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected 4-D tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

/// Stride-1 grouped 2-D convolution (cross-correlation).
///
/// `x`: [B, Cin, H, W]; `w`: [Cout, Cin/g, kh, kw]. Output spatial size is
/// `H + 2p - kh + 1` x `W + 2p - kw + 1`.
pub fn conv2d_forward(x: &ArrayD<f64>, w: &ArrayD<f64>, pad: usize, groups: usize) -> ArrayD<f64> {
    let (b, cin, h, wd) = dims4(x.shape());
    let (cout, cin_g, kh, kw) = dims4(w.shape());
    assert_eq!(cin, cin_g * groups, "channel/group mismatch");
    assert_eq!(cout % groups, 0, "cout not divisible by groups");
    let cout_g = cout / groups;
    let oh = h + 2 * pad + 1 - kh;
    let ow = wd + 2 * pad + 1 - kw;

    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let mut out = vec![0.0f64; b * cout * oh * ow];

    out.par_chunks_mut(oh * ow).enumerate().for_each(|(i, o)| {
        let bi = i / cout;
        let co = i % cout;
        let gi = co / cout_g;
        let x_base = bi * cin * h * wd + gi * cin_g * h * wd;
        let w_base = co * cin_g * kh * kw;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cin_g {
                    let xo = x_base + ci * h * wd;
                    let wo = w_base + ci * kh * kw;
                    for ky in 0..kh {
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        for kx in 0..kw {
                            let ix = ox + kx;
                            if ix < pad || ix >= wd + pad {
                                continue;
                            }
                            acc += xs[xo + iy * wd + (ix - pad)] * ws[wo + ky * kw + kx];
                        }
                    }
                }
                o[oy * ow + ox] = acc;
            }
        }
    });

    ArrayD::from_shape_vec(IxDyn(&[b, cout, oh, ow]), out).unwrap()
}

/// Gradient of `conv2d_forward` with respect to the input.
pub fn conv2d_backward_input(
    dout: &ArrayD<f64>,
    w: &ArrayD<f64>,
    pad: usize,
    groups: usize,
    in_shape: &[usize],
) -> ArrayD<f64> {
    let (b, cin, h, wd) = dims4(in_shape);
    let (cout, cin_g, kh, kw) = dims4(w.shape());
    let cout_g = cout / groups;
    let (_, _, oh, ow) = dims4(dout.shape());

    let gs = dout.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let mut dx = vec![0.0f64; b * cin * h * wd];

    dx.par_chunks_mut(h * wd).enumerate().for_each(|(i, o)| {
        let bi = i / cin;
        let ci = i % cin;
        let gi = ci / cin_g;
        let ci_g = ci % cin_g;
        for iy in 0..h {
            for ix in 0..wd {
                let mut acc = 0.0;
                for cg in 0..cout_g {
                    let co = gi * cout_g + cg;
                    let g_base = bi * cout * oh * ow + co * oh * ow;
                    let w_base = co * cin_g * kh * kw + ci_g * kh * kw;
                    for ky in 0..kh {
                        let oy = iy + pad;
                        if oy < ky || oy - ky >= oh {
                            continue;
                        }
                        let oy = oy - ky;
                        for kx in 0..kw {
                            let ox = ix + pad;
                            if ox < kx || ox - kx >= ow {
                                continue;
                            }
                            acc += gs[g_base + oy * ow + (ox - kx)] * ws[w_base + ky * kw + kx];
                        }
                    }
                }
                o[iy * wd + ix] = acc;
            }
        }
    });

    ArrayD::from_shape_vec(IxDyn(&[b, cin, h, wd]), dx).unwrap()
}

/// Gradient of `conv2d_forward` with respect to the kernel.
pub fn conv2d_backward_weight(
    dout: &ArrayD<f64>,
    x: &ArrayD<f64>,
    pad: usize,
    groups: usize,
    w_shape: &[usize],
) -> ArrayD<f64> {
    let (b, cin, h, wd) = dims4(x.shape());
    let (cout, cin_g, kh, kw) = dims4(w_shape);
    let cout_g = cout / groups;
    let (_, _, oh, ow) = dims4(dout.shape());
    assert_eq!(cin, cin_g * groups);

    let gs = dout.as_slice().unwrap();
    let xs = x.as_slice().unwrap();
    let mut dw = vec![0.0f64; cout * cin_g * kh * kw];

    dw.par_chunks_mut(cin_g * kh * kw)
        .enumerate()
        .for_each(|(co, o)| {
            let gi = co / cout_g;
            for ci in 0..cin_g {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for bi in 0..b {
                            let g_base = bi * cout * oh * ow + co * oh * ow;
                            let x_base = bi * cin * h * wd + (gi * cin_g + ci) * h * wd;
                            for oy in 0..oh {
                                let iy = oy + ky;
                                if iy < pad || iy >= h + pad {
                                    continue;
                                }
                                let iy = iy - pad;
                                for ox in 0..ow {
                                    let ix = ox + kx;
                                    if ix < pad || ix >= wd + pad {
                                        continue;
                                    }
                                    acc += gs[g_base + oy * ow + ox] * xs[x_base + iy * wd + (ix - pad)];
                                }
                            }
                        }
                        o[ci * kh * kw + ky * kw + kx] = acc;
                    }
                }
            }
        });

    ArrayD::from_shape_vec(IxDyn(w_shape), dw).unwrap()
}

/// [B, C*r*r, H, W] -> [B, C, H*r, W*r], matching the usual pixel-shuffle layout
/// (input channel `c*r*r + i*r + j` lands at spatial offset `(i, j)`).
pub fn pixel_shuffle(x: &ArrayD<f64>, r: usize) -> ArrayD<f64> {
    let (b, c_in, h, w) = dims4(x.shape());
    assert_eq!(c_in % (r * r), 0);
    let c = c_in / (r * r);
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0f64; b * c * h * r * w * r];
    let (oh, ow) = (h * r, w * r);
    for bi in 0..b {
        for co in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ci = co * r * r + i * r + j;
                    let x_base = bi * c_in * h * w + ci * h * w;
                    let o_base = bi * c * oh * ow + co * oh * ow;
                    for y in 0..h {
                        for xx in 0..w {
                            out[o_base + (y * r + i) * ow + (xx * r + j)] =
                                xs[x_base + y * w + xx];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).unwrap()
}

/// Inverse of [`pixel_shuffle`]: [B, C, H*r, W*r] -> [B, C*r*r, H, W].
pub fn pixel_unshuffle(x: &ArrayD<f64>, r: usize) -> ArrayD<f64> {
    let (b, c, ih, iw) = dims4(x.shape());
    assert_eq!(ih % r, 0);
    assert_eq!(iw % r, 0);
    let (h, w) = (ih / r, iw / r);
    let c_out = c * r * r;
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0f64; b * c_out * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let x_base = bi * c * ih * iw + ci * ih * iw;
            for i in 0..r {
                for j in 0..r {
                    let co = ci * r * r + i * r + j;
                    let o_base = bi * c_out * h * w + co * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            out[o_base + y * w + xx] =
                                xs[x_base + (y * r + i) * iw + (xx * r + j)];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c_out, h, w]), out).unwrap()
}

/// Precomputed 1-D interpolation taps for one output axis
/// (half-pixel centers, edges clamped).
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 > i0 { src - i0 as f64 } else { 0.0 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resample of [B, C, H, W] to [B, C, oh, ow].
pub fn bilinear_resize(x: &ArrayD<f64>, oh: usize, ow: usize) -> ArrayD<f64> {
    let (b, c, h, w) = dims4(x.shape());
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0f64; b * c * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(i, o)| {
        let base = i * h * w;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v00 = xs[base + y0 * w + x0];
                let v01 = xs[base + y0 * w + x1];
                let v10 = xs[base + y1 * w + x0];
                let v11 = xs[base + y1 * w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                o[oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    });
    ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).unwrap()
}

/// Adjoint of [`bilinear_resize`]: scatters output gradients back through the taps.
pub fn bilinear_resize_backward(
    dout: &ArrayD<f64>,
    in_shape: &[usize],
) -> ArrayD<f64> {
    let (b, c, h, w) = dims4(in_shape);
    let (_, _, oh, ow) = dims4(dout.shape());
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let gs = dout.as_slice().unwrap();
    let mut dx = vec![0.0f64; b * c * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(i, o)| {
        let base = i * oh * ow;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = gs[base + oy * ow + ox];
                o[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                o[y0 * w + x1] += g * (1.0 - fy) * fx;
                o[y1 * w + x0] += g * fy * (1.0 - fx);
                o[y1 * w + x1] += g * fy * fx;
            }
        }
    });
    ArrayD::from_shape_vec(IxDyn(in_shape), dx).unwrap()
}
