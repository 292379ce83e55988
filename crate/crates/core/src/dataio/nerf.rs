use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{load_png, save_png, Dataset, SeedPoint, View, DEFAULT_AABB};
use crate::renderer::Camera;
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Transforms {
    camera_angle_x: f64,
    frames: Vec<FrameEntry>,
    /// Optional scene box override `[min, max]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aabb: Option<[[f64; 3]; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

const POINTS_FILE: &str = "points.json";

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), message: e.to_string() })
}

fn image_path(dir: &Path, file_path: &str) -> PathBuf {
    let p = dir.join(file_path);
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

/// Camera from a camera-to-world matrix whose camera looks down `-z` with `y` up.
fn camera_from_pose(m: &[[f64; 4]; 4], width: u32, height: u32, focal: f64) -> Camera {
    let r = Matrix3::from_fn(|i, j| m[i][j]);
    let flip = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
    Camera {
        width,
        height,
        fx: focal,
        fy: focal,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        rotation: r * flip,
        position: Vector3::new(m[0][3], m[1][3], m[2][3]),
        near: Camera::DEFAULT_NEAR,
        far: Camera::DEFAULT_FAR,
    }
}

fn pose_from_camera(cam: &Camera) -> [[f64; 4]; 4] {
    let flip = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
    let r = cam.rotation * flip;
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[(i, j)];
        }
        m[i][3] = cam.position[i];
    }
    m[3][3] = 1.0;
    m
}

/// Loads `transforms_<split>.json` and its images.
pub fn load_nerf_split(dir: &Path, split: &str) -> Result<Vec<View>> {
    let json_path = dir.join(format!("transforms_{split}.json"));
    let tf: Transforms = read_json(&json_path)?;
    let mut views: Vec<View> = Vec::with_capacity(tf.frames.len());
    for frame in &tf.frames {
        let path = image_path(dir, &frame.file_path);
        let (w, h, image) = load_png(&path)?;
        if let Some(first) = views.first() {
            if (w, h) != (first.camera.width, first.camera.height) {
                return Err(Error::DimensionMismatch {
                    path,
                    got_w: w,
                    got_h: h,
                    want_w: first.camera.width,
                    want_h: first.camera.height,
                });
            }
        }
        let focal = 0.5 * w as f64 / (0.5 * tf.camera_angle_x).tan();
        views.push(View {
            name: frame.file_path.clone(),
            camera: camera_from_pose(&frame.transform_matrix, w, h, focal),
            image,
        });
    }
    Ok(views)
}

/// Loads a NeRF-synthetic style directory. The test split and the seed
/// point file are optional.
pub fn load_nerf_synthetic(dir: &Path) -> Result<Dataset> {
    let train = load_nerf_split(dir, "train")?;
    let test = if dir.join("transforms_test.json").exists() {
        load_nerf_split(dir, "test")?
    } else {
        Vec::new()
    };
    let tf: Transforms = read_json(&dir.join("transforms_train.json"))?;
    let (lo, hi) = tf.aabb.map_or(DEFAULT_AABB, |[a, b]| (a, b));
    let points_path = dir.join(POINTS_FILE);
    let points = if points_path.exists() { Some(read_json::<Vec<SeedPoint>>(&points_path)?) } else { None };
    let ds = Dataset {
        train,
        test,
        points,
        aabb_min: Vector3::from(lo),
        aabb_max: Vector3::from(hi),
    };
    ds.validate()?;
    Ok(ds)
}

fn write_split(dir: &Path, split: &str, views: &[View], aabb: Option<[[f64; 3]; 2]>) -> Result<()> {
    let Some(first) = views.first() else {
        return Ok(());
    };
    let img_dir = dir.join(split);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut frames = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let rel = format!("./{split}/r_{i:03}");
        save_png(&image_path(dir, &rel), v.camera.width, v.camera.height, &v.image)?;
        frames.push(FrameEntry { file_path: rel, transform_matrix: pose_from_camera(&v.camera) });
    }
    let tf = Transforms {
        camera_angle_x: 2.0 * (0.5 * first.camera.width as f64 / first.camera.fx).atan(),
        frames,
        aabb,
    };
    let path = dir.join(format!("transforms_{split}.json"));
    let text = serde_json::to_string_pretty(&tf).expect("plain data");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes a dataset in the layout [`load_nerf_synthetic`] reads. Images are
/// quantized to 8 bits.
pub fn write_nerf_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let aabb = Some([ds.aabb_min.into(), ds.aabb_max.into()]);
    write_split(dir, "train", &ds.train, aabb)?;
    write_split(dir, "test", &ds.test, aabb)?;
    if let Some(points) = &ds.points {
        let path = dir.join(POINTS_FILE);
        fs::write(&path, serde_json::to_string(points).expect("plain data")).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
