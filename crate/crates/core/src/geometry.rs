//! Surfel parameterization, local frames, ray/splat intersection and the
//! Gaussian and beta kernels with their analytic derivatives.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::renderer::Camera;

/// Ratio between the kernel support radius and the stored tangent scale.
pub const DEFAULT_KAPPA: f64 = 3.0;
/// Rays with `|n . d|` below this are treated as parallel to the disk.
pub const PARALLEL_EPS: f64 = 1e-8;
/// Hits closer than this along the ray are rejected.
pub const T_NEAR: f64 = 0.01;
pub const SCALE_MIN: f64 = 1e-6;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Largest representable exponent below 4.
const BETA_MAX: f64 = 4.0 - 4.0 * f64::EPSILON;

/// Exponent of the beta kernel, mapped into `(0, 4)`. The clamp only bites
/// where the sigmoid saturates in floating point (`|b| > ~37`).
#[inline]
pub fn beta_exponent(b: f64) -> f64 {
    (4.0 * sigmoid(b)).clamp(f64::MIN_POSITIVE, BETA_MAX)
}

/// `(1 - r2)^(4 sigmoid(b))`, zero at and beyond the support edge.
pub fn beta_kernel(r2: f64, b: f64) -> f64 {
    if r2 >= 1.0 {
        return 0.0;
    }
    (1.0 - r2).powf(beta_exponent(b))
}

/// Value and partial derivatives `(G, dG/dr2, dG/db)` of the beta kernel.
pub fn beta_kernel_grad(r2: f64, b: f64) -> (f64, f64, f64) {
    if r2 >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let s = sigmoid(b);
    let beta = beta_exponent(b);
    let base = 1.0 - r2;
    let value = base.powf(beta);
    let d_r2 = -beta * base.powf(beta - 1.0);
    let d_b = value * base.ln() * 4.0 * s * (1.0 - s);
    (value, d_r2, d_b)
}

/// `exp(-kappa^2 r2 / 2)`: a Gaussian whose `kappa`-sigma contour sits at `r2 = 1`.
pub fn gaussian_kernel(r2: f64, kappa: f64) -> f64 {
    (-0.5 * kappa * kappa * r2).exp()
}

pub fn gaussian_kernel_grad(r2: f64, kappa: f64) -> (f64, f64) {
    let v = gaussian_kernel(r2, kappa);
    (v, -0.5 * kappa * kappa * v)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    Gaussian,
    #[default]
    Beta,
}

impl KernelMode {
    /// Kernel value at normalized squared radius `r2`; zero outside the support.
    #[inline]
    pub fn eval(self, r2: f64, b: f64, kappa: f64) -> f64 {
        if r2 > 1.0 {
            return 0.0;
        }
        match self {
            KernelMode::Gaussian => gaussian_kernel(r2, kappa),
            KernelMode::Beta => beta_kernel(r2, b),
        }
    }

    /// `(G, dG/dr2, dG/db)`.
    #[inline]
    pub fn eval_grad(self, r2: f64, b: f64, kappa: f64) -> (f64, f64, f64) {
        if r2 > 1.0 {
            return (0.0, 0.0, 0.0);
        }
        match self {
            KernelMode::Gaussian => {
                let (v, d) = gaussian_kernel_grad(r2, kappa);
                (v, d, 0.0)
            }
            KernelMode::Beta => beta_kernel_grad(r2, b),
        }
    }
}

/// One surfel in array-of-structs form. Scales here are world-space
/// half-extents; [`SurfelCloud`] stores their logarithms.
#[derive(Clone, Debug, PartialEq)]
pub struct Surfel {
    pub position: Vector3<f64>,
    /// `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub scale: [f64; 2],
    pub opacity_logit: f64,
    pub beta: f64,
    pub latent: Vec<f64>,
}

impl Surfel {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn frame(&self) -> Frame {
        splat_frame(&self.rotation)
    }
}

/// Orthonormal tangent frame of a surfel; `normal = tangent_u x tangent_v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub tangent_u: Vector3<f64>,
    pub tangent_v: Vector3<f64>,
    pub normal: Vector3<f64>,
}

fn normalize_quat(q: &[f64; 4]) -> ([f64; 4], f64) {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    ([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm], norm)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Columns of the rotation of `q` (normalized first). Stored rotations are
/// renormalized after every optimizer step, so this is the identity map on
/// them; normalizing here keeps the reverse pass consistent with raw inputs.
pub fn splat_frame(q: &[f64; 4]) -> Frame {
    let (qn, _) = normalize_quat(q);
    let r = quat_to_matrix(&qn);
    Frame {
        tangent_u: r.column(0).into_owned(),
        tangent_v: r.column(1).into_owned(),
        normal: r.column(2).into_owned(),
    }
}

/// Pulls a gradient on the frame columns back to the raw (unnormalized) quaternion.
pub fn splat_frame_backward(q: &[f64; 4], d_frame: &Matrix3<f64>) -> [f64; 4] {
    let (qn, norm) = normalize_quat(q);
    let [w, x, y, z] = qn;
    let g = |r: usize, c: usize| d_frame[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
        + z * g(2, 0)
        + w * g(2, 1)
        - 2.0 * x * g(2, 2));
    let dy = 2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
        - w * g(2, 0)
        + z * g(2, 1)
        - 2.0 * y * g(2, 2));
    let dz = 2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0)
        - 2.0 * z * g(1, 1)
        + y * g(1, 2)
        + x * g(2, 0)
        + y * g(2, 1));
    let dqn = [dw, dx, dy, dz];
    let dot: f64 = (0..4).map(|i| qn[i] * dqn[i]).sum();
    std::array::from_fn(|i| (dqn[i] - qn[i] * dot) / norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl Ray {
    /// Builds a ray, normalizing `dir`.
    pub fn new(origin: Vector3<f64>, dir: Vector3<f64>) -> Self {
        Ray {
            origin,
            dir: dir.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.dir * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intersection {
    pub t: f64,
    pub point: Vector3<f64>,
    pub uv: [f64; 2],
    pub r2: f64,
    pub kernel: f64,
}

/// Per-render cache of everything the inner compositing loop needs about a surfel.
#[derive(Clone, Copy, Debug)]
pub struct PreparedSurfel {
    pub position: Vector3<f64>,
    pub frame: Frame,
    /// `1 / (kappa s_u)`, `1 / (kappa s_v)`.
    pub inv_extent: [f64; 2],
    pub opacity: f64,
    pub beta: f64,
}

impl PreparedSurfel {
    pub fn new(surfel: &Surfel, kappa: f64) -> Self {
        PreparedSurfel {
            position: surfel.position,
            frame: surfel.frame(),
            inv_extent: [
                1.0 / (kappa * surfel.scale[0]),
                1.0 / (kappa * surfel.scale[1]),
            ],
            opacity: surfel.opacity(),
            beta: surfel.beta,
        }
    }

    /// Plane hit inside the support ellipse, without kernel evaluation.
    /// Returns `(t, point, uv, r2)`.
    #[inline]
    pub fn hit(&self, ray: &Ray) -> Option<(f64, Vector3<f64>, [f64; 2], f64)> {
        let n = &self.frame.normal;
        let denom = n.dot(&ray.dir);
        if denom.abs() < PARALLEL_EPS {
            return None;
        }
        let t = n.dot(&(self.position - ray.origin)) / denom;
        if !(t > T_NEAR) {
            return None;
        }
        let point = ray.at(t);
        let rel = point - self.position;
        let u = rel.dot(&self.frame.tangent_u);
        let v = rel.dot(&self.frame.tangent_v);
        let a = u * self.inv_extent[0];
        let b = v * self.inv_extent[1];
        let r2 = a * a + b * b;
        if r2 > 1.0 {
            return None;
        }
        Some((t, point, [u, v], r2))
    }
}

/// Ray/surfel-plane intersection restricted to the `kappa`-scaled support.
pub fn intersect(ray: &Ray, surfel: &Surfel, kappa: f64, kernel: KernelMode) -> Option<Intersection> {
    let prepared = PreparedSurfel::new(surfel, kappa);
    let (t, point, uv, r2) = prepared.hit(ray)?;
    Some(Intersection {
        t,
        point,
        uv,
        r2,
        kernel: kernel.eval(r2, surfel.beta, kappa),
    })
}

/// Screen-space axis-aligned rectangle in continuous pixel coordinates
/// (pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScreenRect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl ScreenRect {
    /// Inclusive pixel ranges whose centers fall inside the rectangle, clipped
    /// to the image. `None` when no pixel center is covered.
    pub fn pixel_range(&self, width: u32, height: u32) -> Option<([u32; 2], [u32; 2])> {
        const MARGIN: f64 = 1e-6;
        let x0 = (self.x_min - 0.5 - MARGIN).ceil().max(0.0);
        let x1 = (self.x_max - 0.5 + MARGIN).floor().min(width as f64 - 1.0);
        let y0 = (self.y_min - 0.5 - MARGIN).ceil().max(0.0);
        let y1 = (self.y_max - 0.5 + MARGIN).floor().min(height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            return None;
        }
        Some(([x0 as u32, x1 as u32], [y0 as u32, y1 as u32]))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// Conservative bound of the projected support ellipse.
///
/// The rim `mu + kappa (s_u cos th t_u + s_v sin th t_v)` maps to homogeneous
/// image coordinates `A (cos th, sin th, 1)`; the tangent lines `x = X` of
/// that conic solve a quadratic in `X`. Disks straddling the near plane
/// project unboundedly and get the full screen.
pub fn project_aabb(surfel: &Surfel, camera: &Camera, kappa: f64) -> Option<ScreenRect> {
    let frame = surfel.frame();
    let r_cw = camera.rotation.transpose();
    let axis_u = r_cw * (frame.tangent_u * (kappa * surfel.scale[0]));
    let axis_v = r_cw * (frame.tangent_v * (kappa * surfel.scale[1]));
    let center = camera.world_to_camera(&surfel.position);

    let z_reach = (axis_u.z * axis_u.z + axis_v.z * axis_v.z).sqrt();
    let z_min = center.z - z_reach;
    let z_max = center.z + z_reach;
    if z_max < camera.near || z_min > camera.far {
        return None;
    }
    let full = ScreenRect {
        x_min: 0.0,
        x_max: camera.width as f64,
        y_min: 0.0,
        y_max: camera.height as f64,
    };
    if z_min <= camera.near {
        return Some(full);
    }

    // Rows of A (K applied to the camera-space columns) as vectors over (cos, sin, 1).
    let row = |f: f64, c: f64, comp: usize| -> [f64; 3] {
        [
            f * axis_u[comp] + c * axis_u.z,
            f * axis_v[comp] + c * axis_v.z,
            f * center[comp] + c * center.z,
        ]
    };
    let rz = [axis_u.z, axis_v.z, center.z];
    let dot_d = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] - a[2] * b[2];
    let rdr = dot_d(&rz, &rz);
    if rdr >= 0.0 {
        return Some(full);
    }
    let extent = |p: [f64; 3]| -> (f64, f64) {
        let pdr = dot_d(&p, &rz);
        let pdp = dot_d(&p, &p);
        let disc = (pdr * pdr - rdr * pdp).max(0.0);
        let mid = pdr / rdr;
        let half = disc.sqrt() / rdr.abs();
        (mid - half, mid + half)
    };
    let (x_min, x_max) = extent(row(camera.fx, camera.cx, 0));
    let (y_min, y_max) = extent(row(camera.fy, camera.cy, 1));
    Some(ScreenRect {
        x_min,
        x_max,
        y_min,
        y_max,
    })
}

/// Structure-of-arrays storage for `N` surfels.
///
/// Rotations are raw quaternions (renormalized by the optimizer), scales are
/// stored as natural logarithms and opacities as logits.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SurfelCloud {
    pub latent_dim: usize,
    pub positions: Vec<f64>,
    pub rotations: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub betas: Vec<f64>,
    pub latents: Vec<f64>,
}

impl SurfelCloud {
    pub fn new(latent_dim: usize) -> Self {
        SurfelCloud {
            latent_dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    pub fn push(&mut self, s: &Surfel) {
        assert_eq!(s.latent.len(), self.latent_dim, "latent width");
        assert!(s.scale[0] > 0.0 && s.scale[1] > 0.0, "scales must be positive");
        self.positions.extend(s.position.iter());
        self.rotations.extend_from_slice(&s.rotation);
        self.log_scales.push(s.scale[0].ln());
        self.log_scales.push(s.scale[1].ln());
        self.opacity_logits.push(s.opacity_logit);
        self.betas.push(s.beta);
        self.latents.extend_from_slice(&s.latent);
    }

    pub fn get(&self, i: usize) -> Surfel {
        let d = self.latent_dim;
        Surfel {
            position: self.position(i),
            rotation: self.rotation(i),
            scale: [self.log_scales[2 * i].exp(), self.log_scales[2 * i + 1].exp()],
            opacity_logit: self.opacity_logits[i],
            beta: self.betas[i],
            latent: self.latents[i * d..(i + 1) * d].to_vec(),
        }
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::new(
            self.positions[3 * i],
            self.positions[3 * i + 1],
            self.positions[3 * i + 2],
        )
    }

    pub fn set_position(&mut self, i: usize, p: &Vector3<f64>) {
        self.positions[3 * i..3 * i + 3].copy_from_slice(p.as_slice());
    }

    pub fn rotation(&self, i: usize) -> [f64; 4] {
        std::array::from_fn(|k| self.rotations[4 * i + k])
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn opacities(&self) -> Vec<f64> {
        self.opacity_logits.iter().map(|&l| sigmoid(l)).collect()
    }

    pub fn latent(&self, i: usize) -> &[f64] {
        &self.latents[i * self.latent_dim..(i + 1) * self.latent_dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = Surfel> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Renormalizes every quaternion and clamps log-scales to `[ln s_min, ln s_max]`.
    pub fn sanitize(&mut self, scale_max: f64) {
        for q in self.rotations.chunks_exact_mut(4) {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                // leaves already-unit quaternions bit-identical
                if (n - 1.0).abs() > 1e-12 {
                    q.iter_mut().for_each(|v| *v /= n);
                }
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
        let (lo, hi) = (SCALE_MIN.ln(), scale_max.ln());
        for s in &mut self.log_scales {
            *s = s.clamp(lo, hi);
        }
    }

    /// Keeps the surfels for which `keep[i]` holds, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let d = self.latent_dim;
        retain_chunks(&mut self.positions, 3, keep);
        retain_chunks(&mut self.rotations, 4, keep);
        retain_chunks(&mut self.log_scales, 2, keep);
        retain_chunks(&mut self.opacity_logits, 1, keep);
        retain_chunks(&mut self.betas, 1, keep);
        retain_chunks(&mut self.latents, d, keep);
    }

    /// Copies every parameter of surfel `src` into slot `dst`.
    pub fn copy_surfel(&mut self, src: usize, dst: usize) {
        let d = self.latent_dim;
        copy_chunk(&mut self.positions, 3, src, dst);
        copy_chunk(&mut self.rotations, 4, src, dst);
        copy_chunk(&mut self.log_scales, 2, src, dst);
        copy_chunk(&mut self.opacity_logits, 1, src, dst);
        copy_chunk(&mut self.betas, 1, src, dst);
        copy_chunk(&mut self.latents, d, src, dst);
    }

    /// Checks array lengths against each other.
    pub fn validate(&self) -> crate::Result<()> {
        let n = self.len();
        let ok = self.positions.len() == 3 * n
            && self.rotations.len() == 4 * n
            && self.log_scales.len() == 2 * n
            && self.betas.len() == n
            && self.latents.len() == self.latent_dim * n;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Shape(format!(
                "surfel arrays disagree on count {n}"
            )))
        }
    }
}

pub(crate) fn retain_chunks(v: &mut Vec<f64>, width: usize, keep: &[bool]) {
    if width == 0 {
        return;
    }
    let mut w = 0;
    for (i, &k) in keep.iter().enumerate() {
        if k {
            if w != i {
                v.copy_within(i * width..(i + 1) * width, w * width);
            }
            w += 1;
        }
    }
    v.truncate(w * width);
}

pub(crate) fn copy_chunk(v: &mut [f64], width: usize, src: usize, dst: usize) {
    if src != dst && width > 0 {
        v.copy_within(src * width..(src + 1) * width, dst * width);
    }
}
