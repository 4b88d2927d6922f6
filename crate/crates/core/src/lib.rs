//! Test-time self domain adaptation.
//!
//! A frozen task network (residual U-Net) and a bank of auto-encoders are
//! trained offline on source images. At test time, small adaptors on the
//! input image and on three encoder feature maps are trained per subject to
//! minimize the auto-encoders' reconstruction error, with an orthogonality
//! penalty keeping the feature adaptors distance preserving.

pub mod autodiff;
pub mod benchmark;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Labels, Real, Tensor};
