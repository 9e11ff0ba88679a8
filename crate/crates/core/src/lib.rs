//! Segmentation stack built around a Haar-wavelet edge prior.
//!
//! Layering, bottom to top:
//! - [`tensor`]: dense 4-D `(B, C, H, W)` arrays and the pure ops on them
//!   (convolution, bilinear upsampling, reductions, batch norm, ...).
//! - [`autodiff`]: a tape of those ops with reverse-mode gradients, named
//!   parameter storage, SGD, and a finite-difference gradient checker.
//! - [`wavelet`]: fixed orthonormal Haar analysis/synthesis, the two-level
//!   detail-band edge head, and the scalar edge mask derived from it.
//! - [`wega`]: the edge-guided attention block (reverse / boundary /
//!   input-edge branches, fusion convs, CBAM refinement).
//! - [`model`]: a small encoder-decoder with deep supervision that mounts
//!   `wega` blocks on its decoder stages, plus training and checkpointing.
//! - [`metrics`]: BCE+Dice training objective and the binary-segmentation
//!   evaluation suite (Dice, IoU, MAE, ...).
//! - [`synth`]: seeded synthetic blob/ellipse dataset used by the toy
//!   training loop and the CLI.
//!
//! Everything is f64 end to end; `tensor` additionally compiles for f32
//! (`TensorBase<f32>`) for callers that want a faster, looser-tolerance mode.

pub mod autodiff;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod wavelet;
pub mod wega;

pub use error::{Error, Result};
pub use tensor::Tensor;
