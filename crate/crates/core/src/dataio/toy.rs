//! Analytic toy scenes: textured rectangles ray cast with 3x3 supersampling.
//!
//! Generation uses only `+ - * /`, `floor` and `sqrt`, all correctly rounded
//! in IEEE arithmetic, so images are bit-reproducible across platforms.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Dataset, SeedPoint, View};
use crate::geometry::Ray;
use crate::renderer::Camera;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyScene {
    TexturedQuad,
    TwoPlanes,
    Cube,
}

impl ToyScene {
    pub const ALL: [ToyScene; 3] = [ToyScene::TexturedQuad, ToyScene::TwoPlanes, ToyScene::Cube];

    pub fn name(self) -> &'static str {
        match self {
            ToyScene::TexturedQuad => "textured_quad",
            ToyScene::TwoPlanes => "two_planes",
            ToyScene::Cube => "cube",
        }
    }
}

impl fmt::Display for ToyScene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToyScene {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ToyScene::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownScene(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub scene: ToyScene,
    pub width: u32,
    pub height: u32,
    /// Total views; every fourth (index 2 mod 4) is held out.
    pub views: usize,
    pub focal: f64,
    pub radius: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec { scene: ToyScene::TexturedQuad, width: 64, height: 64, views: 8, focal: 70.0, radius: 3.5 }
    }
}

impl ToySpec {
    pub fn new(scene: ToyScene) -> Self {
        ToySpec { scene, ..Default::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// Smooth colour ramps with a triangle-wave ridge pattern.
    Gradient,
    Checker { cell: f64, a: [f64; 3], b: [f64; 3] },
}

/// Tent function with period 1 and range `[0, 1]`.
fn tri(x: f64) -> f64 {
    (2.0 * (x - x.floor()) - 1.0).abs()
}

impl Texture {
    /// Colour at normalized rectangle coordinates `s, q` in `[0, 1]` and
    /// local offsets `u, v`.
    fn eval(&self, s: f64, q: f64, u: f64, v: f64) -> [f64; 3] {
        match *self {
            Texture::Gradient => [0.15 + 0.7 * s, 0.15 + 0.7 * q * q, 0.3 + 0.4 * tri(1.5 * (s + q))],
            Texture::Checker { cell, a, b } => {
                let parity = ((u / cell).floor() + (v / cell).floor()).rem_euclid(2.0);
                if parity == 0.0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

/// Rectangle `center + u axis_u + v axis_v`, `|u| <= half[0]`, `|v| <= half[1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TexturedRect {
    pub center: [f64; 3],
    pub axis_u: [f64; 3],
    pub axis_v: [f64; 3],
    pub half: [f64; 2],
    pub texture: Texture,
}

impl TexturedRect {
    pub fn normal(&self) -> Vector3<f64> {
        Vector3::from(self.axis_u).cross(&Vector3::from(self.axis_v))
    }

    /// `(t, u, v)` of the ray hit inside the rectangle.
    pub fn hit(&self, ray: &Ray) -> Option<(f64, f64, f64)> {
        let n = self.normal();
        let denom = n.dot(&ray.dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let c = Vector3::from(self.center);
        let t = n.dot(&(c - ray.origin)) / denom;
        if !(t > 0.0) {
            return None;
        }
        let rel = ray.at(t) - c;
        let u = rel.dot(&Vector3::from(self.axis_u));
        let v = rel.dot(&Vector3::from(self.axis_v));
        (u.abs() <= self.half[0] && v.abs() <= self.half[1]).then_some((t, u, v))
    }

    pub fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let s = (u / self.half[0] + 1.0) / 2.0;
        let q = (v / self.half[1] + 1.0) / 2.0;
        self.texture.eval(s, q, u, v)
    }

    pub fn point(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::from(self.center) + Vector3::from(self.axis_u) * u + Vector3::from(self.axis_v) * v
    }

    /// Grid samples with roughly `spacing` between neighbours, edges included.
    pub fn sample_points(&self, spacing: f64) -> Vec<SeedPoint> {
        let nu = ((2.0 * self.half[0] / spacing).round() as usize).max(1);
        let nv = ((2.0 * self.half[1] / spacing).round() as usize).max(1);
        let mut out = Vec::with_capacity((nu + 1) * (nv + 1));
        for j in 0..=nv {
            for i in 0..=nu {
                let u = -self.half[0] + 2.0 * self.half[0] * i as f64 / nu as f64;
                let v = -self.half[1] + 2.0 * self.half[1] * j as f64 / nv as f64;
                out.push(SeedPoint { position: self.point(u, v).into(), color: self.color(u, v) });
            }
        }
        out
    }
}

fn scene_rects(scene: ToyScene) -> Vec<TexturedRect> {
    const X: [f64; 3] = [1.0, 0.0, 0.0];
    const Y: [f64; 3] = [0.0, 1.0, 0.0];
    const Z: [f64; 3] = [0.0, 0.0, 1.0];
    const NX: [f64; 3] = [-1.0, 0.0, 0.0];
    const NZ: [f64; 3] = [0.0, 0.0, -1.0];
    match scene {
        ToyScene::TexturedQuad => vec![TexturedRect {
            center: [0.0; 3],
            axis_u: X,
            axis_v: Y,
            half: [1.0, 1.0],
            texture: Texture::Gradient,
        }],
        ToyScene::TwoPlanes => vec![
            TexturedRect {
                center: [-0.2, 0.0, 0.5],
                axis_u: X,
                axis_v: Y,
                half: [0.5, 0.5],
                texture: Texture::Checker { cell: 0.1, a: [0.85, 0.2, 0.15], b: [0.95, 0.9, 0.8] },
            },
            TexturedRect {
                center: [0.0, 0.0, -0.5],
                axis_u: X,
                axis_v: Y,
                half: [1.2, 1.2],
                texture: Texture::Checker { cell: 0.15, a: [0.15, 0.3, 0.8], b: [0.9, 0.8, 0.2] },
            },
        ],
        ToyScene::Cube => {
            let h = 0.6;
            let face = |center: [f64; 3], axis_u: [f64; 3], axis_v: [f64; 3], a: [f64; 3]| TexturedRect {
                center,
                axis_u,
                axis_v,
                half: [h, h],
                texture: Texture::Checker { cell: 0.3, a, b: [a[0] * 0.5, a[1] * 0.5, a[2] * 0.5] },
            };
            // outward normals: axis_u x axis_v
            vec![
                face([0.0, 0.0, h], X, Y, [0.9, 0.3, 0.3]),
                face([0.0, 0.0, -h], NX, Y, [0.3, 0.9, 0.3]),
                face([h, 0.0, 0.0], NZ, Y, [0.3, 0.3, 0.9]),
                face([-h, 0.0, 0.0], Z, Y, [0.9, 0.9, 0.3]),
                face([0.0, h, 0.0], Z, X, [0.9, 0.3, 0.9]),
                face([0.0, -h, 0.0], X, Z, [0.3, 0.9, 0.9]),
            ]
        }
    }
}

/// Camera positions from the rational circle parametrization
/// `((1 - t^2) / (1 + t^2), 2t / (1 + t^2))`.
fn ring_cameras(spec: &ToySpec) -> Vec<Camera> {
    let n = spec.views;
    (0..n)
        .map(|i| {
            let (t, h) = match spec.scene {
                ToyScene::Cube => ((2.0 * i as f64 + 1.0 - n as f64) / (n as f64 / 2.0), if i % 2 == 0 { 1.4 } else { -1.0 }),
                _ => {
                    let t = if n > 1 { -0.3 + 0.6 * i as f64 / (n - 1) as f64 } else { 0.0 };
                    (t, [0.6, -0.5, 0.1][i % 3])
                }
            };
            let denom = 1.0 + t * t;
            let pos = Vector3::new(spec.radius * 2.0 * t / denom, h, spec.radius * (1.0 - t * t) / denom);
            Camera::look_at(
                spec.width,
                spec.height,
                spec.focal,
                spec.focal,
                pos,
                Vector3::zeros(),
                Vector3::new(0.0, 1.0, 0.0),
            )
        })
        .collect()
}

fn shade(rects: &[TexturedRect], ray: &Ray) -> [f64; 3] {
    let mut best: Option<(f64, [f64; 3])> = None;
    for r in rects {
        if let Some((t, u, v)) = r.hit(ray) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, r.color(u, v)));
            }
        }
    }
    best.map_or([1.0; 3], |(_, c)| c)
}

/// Ground-truth image of `rects` seen from `camera` over a white background.
pub fn ray_cast(rects: &[TexturedRect], camera: &Camera) -> Vec<f64> {
    const SUB: u32 = 3;
    let mut out = Vec::with_capacity(3 * camera.pixel_count());
    for py in 0..camera.height {
        for px in 0..camera.width {
            let mut acc = [0.0; 3];
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let x = px as f64 + (sx as f64 + 0.5) / SUB as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SUB as f64;
                    let c = shade(rects, &camera.ray_at(x, y));
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            out.extend(acc.iter().map(|a| a / (SUB * SUB) as f64));
        }
    }
    out
}

/// Renders a toy scene; returns the dataset and the generating rectangles.
pub fn gen_toy_scene(spec: &ToySpec) -> Result<(Dataset, Vec<TexturedRect>)> {
    if spec.views == 0 || spec.width == 0 || spec.height == 0 {
        return Err(Error::Config("toy scene needs at least one view and pixel".into()));
    }
    let rects = scene_rects(spec.scene);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, camera) in ring_cameras(spec).into_iter().enumerate() {
        let view = View { name: format!("{}_{i:03}", spec.scene), image: ray_cast(&rects, &camera), camera };
        if i % 4 == 2 {
            test.push(view);
        } else {
            train.push(view);
        }
    }
    let points = rects.iter().flat_map(|r| r.sample_points(0.1)).collect();
    let ds = Dataset {
        train,
        test,
        points: Some(points),
        aabb_min: Vector3::from([-1.5; 3]),
        aabb_max: Vector3::from([1.5; 3]),
    };
    Ok((ds, rects))
}
