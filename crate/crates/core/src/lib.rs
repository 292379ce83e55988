//! Differentiable 2D surfel splatting with per-surfel and hash-grid latent appearance.
//!
//! Each surfel carries a small constant latent vector; a spatial hash grid
//! supplies a second, high-frequency latent sampled at the exact ray/surfel
//! intersection. Both are alpha-blended per pixel and decoded to RGB by a
//! small MLP. Geometry is optimized with Langevin noise plus MCMC-style
//! relocation, and a binary-entropy opacity penalty sparsifies the cloud.
//!
//! The crate is organized the same way the pipeline runs:
//!
//! * [`geometry`]: surfel parameters, frames, ray/splat intersection, kernels.
//! * [`field`]: hash grid, spherical-harmonics direction encoding, decoder, Adam.
//! * [`renderer`]: tile binning, compositing, the exact reverse pass.
//! * [`losses`]: photometric, distortion, normal, opacity and entropy terms.
//! * [`train`]: phase schedule, Langevin steps, relocation, pruning, the loop.
//! * [`dataio`]: datasets, toy scenes, checkpoints, PLY export.
//! * [`metrics`]: PSNR, SSIM, chamfer, render timing.
//! * [`cli`]: the `hsplat` command line.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod renderer;
pub mod train;

pub use error::{Error, Result};
pub use field::{Adam, Decoder, HashGrid};
pub use geometry::{KernelMode, Ray, Surfel, SurfelCloud};
pub use renderer::{Camera, FrameBundle, RenderConfig};
pub use train::{Phase, TrainConfig};
