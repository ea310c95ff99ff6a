//! Desk-scale diffusion transformer with unified multi-modal conditioning.
//!
//! The crate trains a small flow-matching diffusion transformer on a fully
//! procedural garment-transfer world where ground truth is exact, so
//! consistency and alignment can be measured without pretrained encoders.
//! The pieces:
//!
//! - [`diffcore`]: dense tensors, a reverse-mode autodiff tape, and the
//!   finite-difference gradient-check harness.
//! - [`worldgen`]: the procedural world — garment renders, scene renders,
//!   garment-agnostic structured prompts, seeded sample generation.
//! - [`conditioning`]: text/garment encoders and the embedding refiner
//!   variants (mlp / joint / parallel / fusion) with masked self-attention.
//! - [`selattn`]: selection strategies (top-k / top-p / top-p-tau / top-pk),
//!   selective cross-attention, and the joint condition-noise mask.
//! - [`backbone`]: the diffusion transformer, flow-matching loss, two-stage
//!   training, and the Euler sampler.
//! - [`evalkit`]: exact consistency/alignment proxies, attention dumps, and
//!   the ablation harness.
//! - [`config`] / [`cli`]: flat key-value run configuration and the
//!   subcommand surface used by the `umc` binary.
//!
//! Runnable walk-throughs for each capability live in `examples/`.

pub mod backbone;
pub mod cli;
pub mod conditioning;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod evalkit;
mod ioutil;
pub mod ppm;
pub mod selattn;
pub mod worldgen;

pub use error::{Error, Result};
