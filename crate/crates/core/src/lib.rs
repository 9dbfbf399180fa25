//! Two-stage GAN cloud removal for optical satellite imagery.
//!
//! Stage one translates single-channel SAR patches into synthetic RGB
//! patches. Stage two removes thick clouds from an optical patch, conditioned
//! on the stage-one translation of the co-registered SAR patch. Both
//! generators share an encoder / dilated-residual-inception bottleneck /
//! decoder layout and are trained against PatchGAN discriminators with an
//! adversarial + L1 + SSIM objective.
//!
//! Everything runs on the CPU. The numerical core ([`nncore`]) is a small
//! hand-written layer library with explicit forward/backward passes; inner
//! loops are data-parallel through [`exec`] when the `parallel` feature is
//! enabled and fall back to plain sequential loops otherwise. Both paths
//! produce bitwise-identical results.

pub mod architectures;
pub mod cloudsim;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod losses;
pub mod nncore;
pub mod training;

pub use error::{Error, Result};
pub use nncore::{Scalar, Tensor};
