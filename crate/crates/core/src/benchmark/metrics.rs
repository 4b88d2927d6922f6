//! Evaluation metrics: Dice overlap, mean squared error and SSIM.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_RANGE: f64 = 1.0;

/// 2|A∩B| / (|A| + |B|) for the pixels labelled `class`; 1 when both sets
/// are empty.
pub fn dice(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("label maps of {} and {} pixels", pred.len(), gt.len())));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (pi, gi) = (p == class, g == class);
        a += pi as usize;
        b += gi as usize;
        both += (pi && gi) as usize;
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

pub fn mse_metric(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("mse of {:?} and {:?}", a.dims(), b.dims())));
    }
    if a.numel() == 0 {
        return Err(Error::InvalidArgument("mse of empty tensors".into()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.numel() as f64)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filtering over valid window positions.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|j| k[j] * p[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every 2-D plane of `a` and `b` (shape `[.., H, W]`).
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("ssim of {:?} and {:?}", a.dims(), b.dims())));
    }
    let d = a.dims();
    if d.len() < 2 || d[d.len() - 2] < SSIM_WINDOW || d[d.len() - 1] < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs planes of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {d:?}")));
    }
    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
    let k = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let planes = a.numel() / (h * w);
    let mut total = 0.0;
    for pl in 0..planes {
        let r = pl * h * w..(pl + 1) * h * w;
        let x: Vec<f64> = a.data()[r.clone()].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[r].iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &k));
        let n = mx.len();
        let s: f64 = (0..n)
            .map(|i| {
                let vx = sxx[i] - mx[i] * mx[i];
                let vy = syy[i] - my[i] * my[i];
                let cov = sxy[i] - mx[i] * my[i];
                ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                    / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2))
            })
            .sum();
        total += s / n as f64;
    }
    Ok(total / planes as f64)
}
