//! Median filtering plus histogram matching, the classical harmonization
//! baseline.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 256;

/// 3×3 median filter per channel with reflection padding (`d c b | a b c d`).
pub fn median_filter3x3(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (n, c, h, w) = x.nchw()?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("median filter needs at least 2×2 pixels, got {h}×{w}")));
    }
    let reflect = |i: isize, len: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= len {
            2 * len - 2 - i as usize
        } else {
            i as usize
        }
    };
    let src = x.data();
    let mut out = vec![0f32; src.len()];
    let mut win = [0f32; 9];
    for plane in 0..n * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut k = 0;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        win[k] = p[reflect(y as isize + dy, h) * w + reflect(xx as isize + dx, w)];
                        k += 1;
                    }
                }
                win.sort_unstable_by(f32::total_cmp);
                out[plane * h * w + y * w + xx] = win[4];
            }
        }
    }
    Tensor::new(x.dims().to_vec(), out)
}

/// Monotone intensity map sending the distribution of `x` onto the
/// histogram of `reference` binned over [0, 1]. Source quantiles use exact
/// pixel ranks, so densely populated intensity ranges are not lumped into
/// one bin. A constant reference has no usable quantiles; `x` is then
/// returned unchanged.
pub fn histogram_match(x: &Tensor<f32>, reference: &Tensor<f32>, bins: usize) -> Result<Tensor<f32>> {
    if x.numel() == 0 || reference.numel() == 0 || bins < 2 {
        return Err(Error::InvalidArgument("histogram matching needs non-empty images and ≥ 2 bins".into()));
    }
    let r = reference.data();
    if r.iter().all(|&v| v == r[0]) {
        log::warn!("histogram matching against a constant reference; image left unchanged");
        return Ok(x.clone());
    }
    let bin = |v: f32| ((v.clamp(0.0, 1.0) * bins as f32) as usize).min(bins - 1);
    let mut hist = vec![0f64; bins];
    for &v in r {
        hist[bin(v)] += 1.0;
    }
    let mut acc = 0.0;
    let ref_cdf: Vec<f64> = hist
        .iter()
        .map(|c| {
            acc += c;
            acc / r.len() as f64
        })
        .collect();
    let mut sorted = x.data().to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let n = sorted.len() as f64;
    Ok(x.map(|v| {
        // fraction of pixels ≤ v, then the smallest reference bin reaching it
        let q = sorted.partition_point(|&s| s <= v) as f64 / n;
        let j = ref_cdf.partition_point(|&c| c < q - 1e-12).min(bins - 1);
        (j as f32 + 0.5) / bins as f32
    }))
}

/// Median filter then histogram match.
pub fn harmonize(x: &Tensor<f32>, reference: &Tensor<f32>) -> Result<Tensor<f32>> {
    histogram_match(&median_filter3x3(x)?, reference, HISTOGRAM_BINS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_removes_impulse_and_keeps_constant() {
        let mut x = Tensor::full([1, 1, 5, 5], 0.5f32);
        x.data_mut()[12] = 1.0;
        let y = median_filter3x3(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn median_matches_hand_computed_corner() {
        // rows [1 2 3] [4 5 6] [7 8 9]; reflected corner window at (0,0) is
        // 5 4 5 / 2 1 2 / 5 4 5 → median 4
        let x = Tensor::new([1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let y = median_filter3x3(&x).unwrap();
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[4], 5.0);
    }

    #[test]
    fn matching_to_self_is_bin_quantization() {
        let x = Tensor::from_fn([1, 1, 16, 16], |i| (i as f32 * 0.37).fract());
        let y = histogram_match(&x, &x, HISTOGRAM_BINS).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1.0 / HISTOGRAM_BINS as f32);
        }
    }

    #[test]
    fn matching_is_monotone_and_hits_reference_range() {
        let x = Tensor::from_fn([1, 1, 8, 8], |i| i as f32 / 64.0 * 0.3);
        let r = Tensor::from_fn([1, 1, 8, 8], |i| 0.6 + i as f32 / 64.0 * 0.3);
        let y = histogram_match(&x, &r, HISTOGRAM_BINS).unwrap();
        for w in y.data().windows(2) {
            assert!(w[0] <= w[1]);
        }
        assert!(y.data().iter().all(|&v| (0.59..=0.91).contains(&v)));
    }

    #[test]
    fn constant_reference_leaves_input() {
        let x = Tensor::from_fn([1, 1, 4, 4], |i| i as f32 / 16.0);
        let r = Tensor::full([1, 1, 4, 4], 0.3f32);
        assert!(histogram_match(&x, &r, 64).unwrap().bit_eq(&x));
    }
}
