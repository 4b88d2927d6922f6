//! Forward and adjoint kernels for the image operations.
//!
//! All functions operate on flat row-major NCHW buffers; shape checks are
//! done by the caller in [`super::Graph`].

use crate::tensor::{matmul_into, Real};

/// Unrolls one `[C, H, W]` sample into a `[C·k·k, H·W]` column matrix for a
/// stride-1 convolution with `pad` zero padding.
pub(crate) fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (xo, v) in out.iter_mut().enumerate() {
                        let sx = xo as isize + shift;
                        *v = if sx < 0 || sx >= w as isize { T::zero() } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx` (added).
pub(crate) fn col2im_add<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for xo in 0..w {
                        let sx = xo as isize + shift;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += src[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvShape {
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

pub(crate) fn conv2d_forward<T: Real>(s: &ConvShape, x: &[T], wt: &[T], b: Option<&[T]>) -> Vec<T> {
    let hw = s.h * s.w;
    let rows = s.col_rows();
    let mut out = vec![T::zero(); s.n * s.cout * hw];
    let mut cols = if s.k == 1 { Vec::new() } else { vec![T::zero(); rows * hw] };
    for ni in 0..s.n {
        let xs = &x[ni * s.cin * hw..(ni + 1) * s.cin * hw];
        let os = &mut out[ni * s.cout * hw..(ni + 1) * s.cout * hw];
        let colm: &[T] = if s.k == 1 {
            xs
        } else {
            im2col(xs, s.cin, s.h, s.w, s.k, s.pad, &mut cols);
            &cols
        };
        if let Some(b) = b {
            for (co, plane) in os.chunks_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        matmul_into(s.cout, rows, hw, wt, false, colm, false, os, b.is_some());
    }
    out
}

/// Returns `(dx, dw, db)`, each computed only when requested.
#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward<T: Real>(
    s: &ConvShape,
    x: &[T],
    wt: &[T],
    gout: &[T],
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let hw = s.h * s.w;
    let rows = s.col_rows();
    let (need_x, need_w, need_b) = need;
    let mut dx = need_x.then(|| vec![T::zero(); s.n * s.cin * hw]);
    let mut dw = need_w.then(|| vec![T::zero(); s.cout * rows]);
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); s.cout];
        for ni in 0..s.n {
            for (co, d) in db.iter_mut().enumerate() {
                let off = (ni * s.cout + co) * hw;
                *d += gout[off..off + hw].iter().copied().sum::<T>();
            }
        }
        db
    });
    let mut cols = if s.k == 1 || !need_w { Vec::new() } else { vec![T::zero(); rows * hw] };
    let mut dcols = if s.k == 1 || !need_x { Vec::new() } else { vec![T::zero(); rows * hw] };
    for ni in 0..s.n {
        let gs = &gout[ni * s.cout * hw..(ni + 1) * s.cout * hw];
        if let Some(dw) = dw.as_mut() {
            let xs = &x[ni * s.cin * hw..(ni + 1) * s.cin * hw];
            let colm: &[T] = if s.k == 1 {
                xs
            } else {
                im2col(xs, s.cin, s.h, s.w, s.k, s.pad, &mut cols);
                &cols
            };
            matmul_into(s.cout, hw, rows, gs, false, colm, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[ni * s.cin * hw..(ni + 1) * s.cin * hw];
            if s.k == 1 {
                matmul_into(rows, s.cout, hw, wt, true, gs, false, dxs, false);
            } else {
                matmul_into(rows, s.cout, hw, wt, true, gs, false, &mut dcols, false);
                col2im_add(&dcols, s.cin, s.h, s.w, s.k, s.pad, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Non-overlapping 2×2 max pooling. Returns the pooled values and, for each
/// output, the flat input index of its (first) maximum.
pub(crate) fn maxpool2x2_forward<T: Real>(x: &[T], nc: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut arg = Vec::with_capacity(nc * oh * ow);
    for p in 0..nc {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best_idx = base + 2 * i * w + 2 * j;
                let mut best = x[best_idx];
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2x_forward<T: Real>(x: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); nc * oh * ow];
    for p in 0..nc {
        for i in 0..oh {
            let src = &x[p * h * w + (i / 2) * w..p * h * w + (i / 2 + 1) * w];
            let dst = &mut out[p * oh * ow + i * ow..p * oh * ow + (i + 1) * ow];
            for (j, v) in dst.iter_mut().enumerate() {
                *v = src[j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(g: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        for i in 0..oh {
            for j in 0..ow {
                dx[p * h * w + (i / 2) * w + j / 2] += g[p * oh * ow + i * ow + j];
            }
        }
    }
    dx
}

/// Per-plane standardization. Returns the normalized values and the
/// per-plane inverse standard deviations.
pub(crate) fn instance_norm_forward<T: Real>(x: &[T], planes: usize, size: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(planes);
    for p in 0..planes {
        let xs = &x[p * size..(p + 1) * size];
        let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / size as f64;
        let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / size as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (o, v) in out[p * size..(p + 1) * size].iter_mut().zip(xs) {
            *o = T::of((v.as_f64() - mean) * inv_std);
        }
        inv.push(T::of(inv_std));
    }
    (out, inv)
}

pub(crate) fn instance_norm_backward<T: Real>(y: &[T], inv: &[T], g: &[T], size: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for (p, &s) in inv.iter().enumerate() {
        let ys = &y[p * size..(p + 1) * size];
        let gs = &g[p * size..(p + 1) * size];
        let n = size as f64;
        let g_mean = gs.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let gy_mean = gs.iter().zip(ys).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / n;
        let s = s.as_f64();
        for ((d, &gv), &yv) in dx[p * size..(p + 1) * size].iter_mut().zip(gs).zip(ys) {
            *d = T::of(s * (gv.as_f64() - g_mean - yv.as_f64() * gy_mean));
        }
    }
    dx
}

/// Softmax over the channel axis of an NCHW buffer.
pub(crate) fn softmax_channels<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        let base = ni * c * hw;
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for ci in 0..c {
                m = m.max(x[base + ci * hw + p]);
            }
            let mut s = T::zero();
            for ci in 0..c {
                let e = (x[base + ci * hw + p] - m).exp();
                out[base + ci * hw + p] = e;
                s += e;
            }
            for ci in 0..c {
                out[base + ci * hw + p] = out[base + ci * hw + p] / s;
            }
        }
    }
    out
}
