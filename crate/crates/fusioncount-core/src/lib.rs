//! FusionCount: an encoder-decoder crowd-counting network that fuses most of
//! its encoder's intermediate feature maps instead of bolting a multiscale
//! module onto the deepest one.
//!
//! The crate is self-contained on CPU:
//!
//! - [`tensor`]: a small dense-tensor engine (conv, pool, bilinear resize,
//!   activations, elementwise ops) with hand-written backward passes and a
//!   finite-difference checker. `f32` is the working precision; everything is
//!   also instantiable at `f64` for gradient verification.
//! - [`model`]: the network itself — truncated VGG-16 encoder with 15 taps,
//!   contrast-feature fusion blocks, two-stream channel-reduction decoding,
//!   and a non-negative density head — plus its ablation variants.
//! - [`analysis`]: static profilers for per-tap receptive fields and
//!   per-layer multiply-accumulate counts.
//! - [`data`]: synthetic scene generation, patch cropping, a pixel-MSE +
//!   count loss, Adam, and a toy training loop with MAE/RMSE evaluation.
//! - [`io`]: PPM/PGM image ingestion and the flat `FCNT` weight format.
//!
//! Every operation is deterministic: results are bitwise identical across
//! runs and across worker counts.

pub mod analysis;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
