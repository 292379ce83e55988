//! Tile-based differentiable rasterization of surfel clouds with blended latent features.
//!
//! The forward pass bins surfels into screen tiles, sorts them by camera
//! depth, and composites per-pixel hybrid features front to back; the decoder
//! then maps each pixel's feature to RGB. [`render_backward`] replays the
//! saved per-pixel contribution lists in reverse.

mod backward;
mod camera;
mod raster;

use serde::{Deserialize, Serialize};

pub use backward::{render_backward, FrameGrads, RenderGrads};
pub use camera::Camera;
pub use raster::{bin_and_sort, composite_pixel, render, render_decomposed, sort_key, PixelComposite, TileBins};

use crate::geometry::{KernelMode, DEFAULT_KAPPA};

/// What each surfel contributes to the blended feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    /// `concat(f_g, H(x))`, decoded per pixel.
    #[default]
    Neural,
    /// `sigmoid(f_g[0..3])` blended directly as RGB; decoder and grid unused.
    Direct,
}

/// Which slice of the hybrid feature survives blending.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMask {
    #[default]
    Full,
    SurfelOnly,
    HashOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub tile_size: u32,
    /// Compositing stops once transmittance drops below this.
    pub t_floor: f64,
    pub kappa: f64,
    pub kernel: KernelMode,
    pub background: [f64; 3],
    pub color_mode: ColorMode,
    pub mask: FeatureMask,
    /// Keep per-contribution features for [`render_backward`].
    pub save_for_backward: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            tile_size: 16,
            t_floor: 1e-4,
            kappa: DEFAULT_KAPPA,
            kernel: KernelMode::Beta,
            background: [1.0; 3],
            color_mode: ColorMode::Neural,
            mask: FeatureMask::Full,
            save_for_backward: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.tile_size == 0 {
            return Err(crate::Error::Config("tile_size must be at least 1".into()));
        }
        if !(self.t_floor > 0.0 && self.t_floor < 1.0) {
            return Err(crate::Error::Config(format!("t_floor {} outside (0, 1)", self.t_floor)));
        }
        if !(self.kappa > 0.0) {
            return Err(crate::Error::Config("kappa must be positive".into()));
        }
        Ok(())
    }
}

/// One blended surfel at one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub index: u32,
    pub alpha: f64,
    /// Transmittance in front of this surfel.
    pub transmittance: f64,
    /// Ray parameter of the hit.
    pub t: f64,
}

impl Contribution {
    #[inline]
    pub fn weight(&self) -> f64 {
        self.transmittance * self.alpha
    }
}

/// Per-pixel buffers of one render plus what the reverse pass needs.
#[derive(Clone, Debug)]
pub struct FrameBundle {
    pub width: u32,
    pub height: u32,
    /// `H x W x 3`, row-major.
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Alpha-weighted expected ray depth.
    pub depth: Vec<f64>,
    /// Alpha-weighted camera-facing normals, `H x W x 3`.
    pub normal: Vec<f64>,
    pub blends: Vec<u32>,
    pub feature_dim: usize,
    /// Blended feature per pixel, `H x W x feature_dim`.
    pub features: Vec<f64>,
    /// Pixel `p` owns `contributions[contrib_start[p]..contrib_start[p + 1]]`.
    pub contrib_start: Vec<usize>,
    pub contributions: Vec<Contribution>,
    /// `feature_dim` values per contribution; empty unless saved.
    pub contrib_features: Vec<f64>,
    /// Tile-list entries never visited because of early termination.
    pub queries_saved: u64,
    pub camera: Camera,
    pub config: RenderConfig,
    /// Surfel count of the rendered cloud, checked by the reverse pass.
    pub surfel_count: usize,
}

impl FrameBundle {
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn pixel_contributions(&self, p: usize) -> &[Contribution] {
        &self.contributions[self.contrib_start[p]..self.contrib_start[p + 1]]
    }

    pub fn pixel_feature(&self, p: usize) -> &[f64] {
        &self.features[p * self.feature_dim..(p + 1) * self.feature_dim]
    }
}

/// Summary of the per-pixel blend counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub queries_saved: u64,
}

/// Overdraw statistics of a render.
pub fn blend_stats(bundle: &FrameBundle) -> BlendStats {
    let n = bundle.blends.len();
    if n == 0 {
        return BlendStats { mean: 0.0, p50: 0.0, p95: 0.0, queries_saved: bundle.queries_saved };
    }
    let mean = bundle.blends.iter().map(|&b| b as f64).sum::<f64>() / n as f64;
    let mut sorted = bundle.blends.clone();
    sorted.sort_unstable();
    let pct = |q: f64| sorted[((q * (n - 1) as f64).round() as usize).min(n - 1)] as f64;
    BlendStats { mean, p50: pct(0.5), p95: pct(0.95), queries_saved: bundle.queries_saved }
}
