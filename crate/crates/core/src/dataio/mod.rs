//! Datasets, procedural toy scenes, checkpoints, PLY export and PNG I/O.

mod checkpoint;
mod imageio;
mod nerf;
mod ply;
mod toy;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use imageio::{load_png, quantize, save_png, save_png_gray};
pub use nerf::{load_nerf_split, load_nerf_synthetic, write_nerf_dataset};
pub use ply::{export_ply, import_ply};
pub use toy::{gen_toy_scene, ray_cast, TexturedRect, Texture, ToyScene, ToySpec};

use crate::renderer::Camera;
use crate::{Error, Result};

/// Axis-aligned scene box of the synthetic convention.
pub const DEFAULT_AABB: ([f64; 3], [f64; 3]) = ([-1.5; 3], [1.5; 3]);

/// One posed image.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    /// `H x W x 3` in `[0, 1]`.
    pub image: Vec<f64>,
}

/// Seed point with colour.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedPoint {
    pub position: [f64; 3],
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<View>,
    pub test: Vec<View>,
    pub points: Option<Vec<SeedPoint>>,
    pub aabb_min: Vector3<f64>,
    pub aabb_max: Vector3<f64>,
}

impl Dataset {
    /// Checks image shapes against their cameras and split-wide dimensions.
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Empty("dataset has no training views".into()));
        }
        for split in [&self.train, &self.test] {
            let Some(first) = split.first() else { continue };
            for v in split {
                v.camera.validate()?;
                if v.camera.width != first.camera.width || v.camera.height != first.camera.height {
                    return Err(Error::DimensionMismatch {
                        path: v.name.clone().into(),
                        got_w: v.camera.width,
                        got_h: v.camera.height,
                        want_w: first.camera.width,
                        want_h: first.camera.height,
                    });
                }
                if v.image.len() != 3 * v.camera.pixel_count() {
                    return Err(Error::Shape(format!(
                        "view {} has {} values for a {}x{} camera",
                        v.name,
                        v.image.len(),
                        v.camera.width,
                        v.camera.height
                    )));
                }
            }
        }
        if (0..3).any(|a| !(self.aabb_min[a] < self.aabb_max[a])) {
            return Err(Error::Config("scene box is empty".into()));
        }
        Ok(())
    }
}
