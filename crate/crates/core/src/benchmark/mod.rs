//! Synthetic benchmark: layered phantoms, parametric domain shifts,
//! baselines and metrics.

mod harmonize;
mod metrics;
mod phantom;
mod runner;
mod shift;

pub use harmonize::{harmonize, histogram_match, median_filter3x3, HISTOGRAM_BINS};
pub use metrics::{dice, mse_metric, ssim, SSIM_K1, SSIM_K2, SSIM_RANGE, SSIM_SIGMA, SSIM_WINDOW};
pub use phantom::{
    gen_phantom_dataset, mix_seed, Annotation, Domain, PhantomConfig, PhantomKind, Provenance, SubjectRecord,
};
pub use runner::*;
pub use shift::{apply_shift, ShiftConfig};
