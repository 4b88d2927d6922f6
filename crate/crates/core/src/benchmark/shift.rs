//! Parametric intensity shifts that turn source images into target-domain
//! images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `y = clip(a·x^γ + b + noise)`, with the noise optionally multiplicative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftConfig {
    pub gamma: f64,
    pub contrast: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
    /// Multiplicative (speckle-like) noise instead of additive.
    pub speckle: bool,
}

impl ShiftConfig {
    pub const IDENTITY: ShiftConfig =
        ShiftConfig { gamma: 1.0, contrast: 1.0, brightness: 0.0, noise_sigma: 0.0, speckle: false };

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("shift gamma must be positive, got {}", self.gamma)));
        }
        if !(self.noise_sigma >= 0.0) || !self.contrast.is_finite() || !self.brightness.is_finite() {
            return Err(Error::Config("shift parameters must be finite with σ ≥ 0".into()));
        }
        Ok(())
    }
}

/// Applies `shift` pixelwise; the result is clipped to [0, 1].
pub fn apply_shift(x: &Tensor<f32>, shift: &ShiftConfig, seed: u64) -> Result<Tensor<f32>> {
    shift.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = *shift;
    Ok(Tensor::new(
        x.dims().to_vec(),
        x.data()
            .iter()
            .map(|&v| {
                let base = s.contrast * (v.max(0.0) as f64).powf(s.gamma);
                let y = if s.noise_sigma == 0.0 {
                    base + s.brightness
                } else {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    if s.speckle {
                        base * (1.0 + s.noise_sigma * e) + s.brightness
                    } else {
                        base + s.brightness + s.noise_sigma * e
                    }
                };
                y.clamp(0.0, 1.0) as f32
            })
            .collect(),
    )?)
}
