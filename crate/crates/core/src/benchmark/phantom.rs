//! Layered phantoms: K smooth horizontal bands with per-band intensity
//! statistics, loosely shaped like flattened retinal layers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::shift::{apply_shift, ShiftConfig};
use crate::error::{Error, Result};
use crate::tensor::{Labels, Tensor};

/// Minimum band thickness in pixels.
const MIN_THICKNESS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    /// Label = band index.
    Segmentation,
    /// Paired target = fixed monotone remap of the clean intensities.
    Synthesis,
}

impl PhantomKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PhantomKind::Segmentation => "segmentation",
            PhantomKind::Synthesis => "synthesis",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub kind: PhantomKind,
    /// Mean intensity of each band, top to bottom; its length is K.
    pub band_means: Vec<f64>,
    /// Per-pixel texture std of each band.
    pub band_stds: Vec<f64>,
    /// Extra white noise on the observed image.
    pub noise: f64,
    /// Amplitude in pixels of the low-frequency boundary undulation.
    pub smoothness: f64,
    /// Stack the band types in a random order per subject instead of top
    /// to bottom, so a band's class is identified by its intensity.
    pub shuffle_bands: bool,
    /// Noise std of the synthesis target.
    pub target_noise: f64,
    pub seed: u64,
}

impl PhantomConfig {
    pub fn classes(&self) -> usize {
        self.band_means.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes();
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 bands, got {k}")));
        }
        if self.band_stds.len() != k {
            return Err(Error::Config(format!("{} band stds for {} bands", self.band_stds.len(), k)));
        }
        if self.height % 8 != 0 || self.width % 8 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("image {}×{} not divisible by 8", self.height, self.width)));
        }
        if (k as f64) * (MIN_THICKNESS + 1.0) > self.height as f64 {
            return Err(Error::Config(format!("{} bands do not fit in {} rows", k, self.height)));
        }
        if self.band_means.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("band means must lie in [0, 1]".into()));
        }
        if self.band_stds.iter().chain([&self.noise, &self.target_noise]).any(|s| *s < 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    /// Clean-intensity remap producing the synthesis target.
    pub fn target_map(u: f64) -> f64 {
        0.9 * (1.0 - u.clamp(0.0, 1.0)).powf(1.5) + 0.05
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Ground truth for a subject.
#[derive(Clone, Debug, PartialEq)]
pub enum Annotation {
    Labels(Labels),
    /// Paired target images `[S, 1, H, W]`.
    Targets(Tensor<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub phantom: PhantomConfig,
    pub shift: Option<ShiftConfig>,
    pub seed: u64,
}

/// One subject: an ordered stack of slices `[S, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub slices: Tensor<f32>,
    pub annotation: Option<Annotation>,
    pub domain: Domain,
    pub provenance: Option<Provenance>,
}

impl SubjectRecord {
    pub fn num_slices(&self) -> usize {
        self.slices.dims()[0]
    }

    pub fn labels(&self) -> Option<&Labels> {
        match &self.annotation {
            Some(Annotation::Labels(l)) => Some(l),
            _ => None,
        }
    }

    pub fn targets(&self) -> Option<&Tensor<f32>> {
        match &self.annotation {
            Some(Annotation::Targets(t)) => Some(t),
            _ => None,
        }
    }

    /// Checks that all slices share one single-channel shape and that the
    /// annotation matches it.
    pub fn validate(&self) -> Result<()> {
        let (s, c, h, w) = self.slices.nchw()?;
        if c != 1 || s == 0 {
            return Err(Error::Shape(format!("subject {} has slice stack {:?}", self.id, self.slices.dims())));
        }
        match &self.annotation {
            Some(Annotation::Labels(l)) if l.dims() != [s, h, w] => Err(Error::Shape(format!(
                "subject {} labels {:?} do not match slices {:?}",
                self.id,
                l.dims(),
                self.slices.dims()
            ))),
            Some(Annotation::Targets(t)) if t.dims() != self.slices.dims() => Err(Error::Shape(format!(
                "subject {} targets {:?} do not match slices {:?}",
                self.id,
                t.dims(),
                self.slices.dims()
            ))),
            _ => Ok(()),
        }
    }

    /// Copy with the slices replaced by `shift` applied to them.
    pub fn shifted(&self, shift: &ShiftConfig, seed: u64) -> Result<SubjectRecord> {
        let mut out = self.clone();
        out.slices = apply_shift(&self.slices, shift, seed)?;
        out.domain = Domain::Target;
        if let Some(p) = out.provenance.as_mut() {
            p.shift = Some(*shift);
        }
        Ok(out)
    }
}

/// Deterministic seed derivation.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-subject layer geometry; slices perturb it slightly.
struct SubjectGeometry {
    /// Band boundary rows at the image centre, length K−1.
    centres: Vec<f64>,
    /// Band type at each depth position.
    order: Vec<usize>,
    amplitudes: [f64; 3],
    phases: [f64; 3],
}

fn subject_geometry(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> SubjectGeometry {
    let k = cfg.classes();
    let h = cfg.height as f64;
    let margin = (cfg.smoothness + MIN_THICKNESS).min(h * 0.15);
    let usable = h - 2.0 * margin;
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.7..1.3)).collect();
    let total: f64 = weights.iter().sum();
    let mut centres = Vec::with_capacity(k - 1);
    let mut acc = margin;
    for w in &weights[..k - 1] {
        acc += usable * w / total;
        centres.push(acc);
    }
    let amplitudes = [1.0, 0.5, 0.25].map(|a| a * cfg.smoothness * rng.random_range(0.5..1.0));
    let phases = [0, 1, 2].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let mut order: Vec<usize> = (0..k).collect();
    if cfg.shuffle_bands {
        order.shuffle(rng);
    }
    SubjectGeometry { centres, order, amplitudes, phases }
}

/// Boundary rows per column, enforcing ordering with a minimum thickness.
fn slice_boundaries(cfg: &PhantomConfig, geo: &SubjectGeometry, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let (h, w) = (cfg.height as f64, cfg.width);
    let jitter: Vec<f64> = geo.centres.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    let wobble: Vec<(f64, f64)> =
        geo.centres.iter().map(|_| (rng.random_range(0.0..0.5), rng.random_range(0.0..std::f64::consts::TAU))).collect();
    let shift = rng.random_range(-0.3..0.3);
    (0..w)
        .map(|x| {
            let t = x as f64 / w as f64 * std::f64::consts::TAU;
            let warp: f64 = (0..3).map(|m| geo.amplitudes[m] * ((m + 1) as f64 * t + geo.phases[m] + shift).sin()).sum();
            let mut prev = MIN_THICKNESS - 1.0;
            geo.centres
                .iter()
                .enumerate()
                .map(|(b, c)| {
                    let remaining = (geo.centres.len() - b) as f64 * MIN_THICKNESS;
                    let y = c + warp + jitter[b] + wobble[b].0 * cfg.smoothness * (2.0 * t + wobble[b].1).sin();
                    let y = y.max(prev + MIN_THICKNESS).min(h - remaining);
                    prev = y;
                    y
                })
                .collect()
        })
        .collect()
}

/// Generates `n_subjects` subjects of `slices_per_subject` slices each.
pub fn gen_phantom_dataset(
    cfg: &PhantomConfig,
    n_subjects: usize,
    slices_per_subject: usize,
    id_prefix: &str,
) -> Result<Vec<SubjectRecord>> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    (0..n_subjects)
        .map(|s| {
            let subject_seed = mix_seed(cfg.seed, s as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
            let geo = subject_geometry(cfg, &mut rng);
            let n = slices_per_subject;
            let mut slices = vec![0f32; n * h * w];
            let mut labels = vec![0u8; n * h * w];
            let mut targets = vec![0f32; n * h * w];
            for si in 0..n {
                let bounds = slice_boundaries(cfg, &geo, &mut rng);
                for y in 0..h {
                    for x in 0..w {
                        let row = y as f64 + 0.5;
                        let class = geo.order[bounds[x].iter().filter(|&&b| row >= b).count()];
                        let i = (si * h + y) * w + x;
                        let e1: f64 = StandardNormal.sample(&mut rng);
                        let e2: f64 = StandardNormal.sample(&mut rng);
                        let e3: f64 = StandardNormal.sample(&mut rng);
                        let clean = (cfg.band_means[class] + cfg.band_stds[class] * e1).clamp(0.0, 1.0);
                        slices[i] = (clean + cfg.noise * e2).clamp(0.0, 1.0) as f32;
                        labels[i] = class as u8;
                        targets[i] = (PhantomConfig::target_map(clean) + cfg.target_noise * e3).clamp(0.0, 1.0) as f32;
                    }
                }
            }
            let slices = Tensor::new([n, 1, h, w], slices)?;
            let annotation = match cfg.kind {
                PhantomKind::Segmentation => Annotation::Labels(Labels::new([n, h, w], labels)?),
                PhantomKind::Synthesis => Annotation::Targets(Tensor::new([n, 1, h, w], targets)?),
            };
            Ok(SubjectRecord {
                id: format!("{id_prefix}{s:03}"),
                slices,
                annotation: Some(annotation),
                domain: Domain::Source,
                provenance: Some(Provenance { phantom: cfg.clone(), shift: None, seed: subject_seed }),
            })
        })
        .collect()
}
