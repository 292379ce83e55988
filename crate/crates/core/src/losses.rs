//! Training objectives and their analytic gradients.
//!
//! Images are row-major `H x W x C` slices of `f64` in `[0, 1]`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::sigmoid;
use crate::renderer::{FrameBundle, FrameGrads};
use crate::train::Phase;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Opacities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the entropy.
pub const BCE_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_dist: f64,
    pub lambda_normal: f64,
    pub lambda_opacity: f64,
    pub lambda_bce: f64,
    /// Sum the per-surfel opacity and entropy terms instead of averaging.
    pub sum_mode: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ssim: 0.2,
            lambda_dist: 100.0,
            lambda_normal: 0.05,
            lambda_opacity: 0.01,
            lambda_bce: 0.01,
            sum_mode: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_dist, self.lambda_normal, self.lambda_opacity, self.lambda_bce];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return Err(Error::Config(format!("lambda_ssim {} outside [0, 1]", self.lambda_ssim)));
        }
        Ok(())
    }
}

/// Unweighted terms and the weighted total of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// `(1 - lambda_ssim) l1 + lambda_ssim (1 - ssim)`.
    pub rgb: f64,
    pub l1: f64,
    pub ssim: f64,
    pub dist: f64,
    pub normal: f64,
    pub opacity: f64,
    pub bce: f64,
    pub total: f64,
}

fn check_dims(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("images have {} and {} values", a.len(), b.len())));
    }
    let px = width * height;
    if px == 0 || a.len() % px != 0 {
        return Err(Error::Shape(format!("{} values do not tile a {width}x{height} image", a.len())));
    }
    Ok(a.len() / px)
}

/// Mean absolute error and its gradient with respect to `pred`.
pub fn l1_loss(pred: &[f64], gt: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len().max(1) as f64;
    let value = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = p - g;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    (value, grad)
}

/// Truncated 1D Gaussian window.
struct Window {
    taps: Vec<f64>,
    radius: isize,
}

impl Window {
    fn new() -> Self {
        let radius = (SSIM_WINDOW / 2) as isize;
        let taps = (-radius..=radius)
            .map(|k| (-((k * k) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
            .collect();
        Window { taps, radius }
    }

    /// In-bounds tap mass at each position of a line of length `n`.
    fn norms(&self, n: usize) -> Vec<f64> {
        (0..n as isize)
            .map(|i| {
                (-self.radius..=self.radius)
                    .filter(|k| (0..n as isize).contains(&(i + k)))
                    .map(|k| self.taps[(k + self.radius) as usize])
                    .sum()
            })
            .collect()
    }

    /// One separable pass along x (`axis == 0`) or y of a single-channel
    /// `w x h` image. `adjoint` applies the transpose of the normalized filter.
    fn pass(&self, src: &[f64], w: usize, h: usize, axis: usize, adjoint: bool) -> Vec<f64> {
        let (len, lines) = if axis == 0 { (w, h) } else { (h, w) };
        let norms = self.norms(len);
        let at = |line: usize, i: usize| if axis == 0 { line * w + i } else { i * w + line };
        let mut out = vec![0.0; src.len()];
        for line in 0..lines {
            for i in 0..len {
                let mut acc = 0.0;
                for k in -self.radius..=self.radius {
                    let j = i as isize + k;
                    if j < 0 || j >= len as isize {
                        continue;
                    }
                    let j = j as usize;
                    let tap = self.taps[(k + self.radius) as usize];
                    acc += if adjoint { tap * src[at(line, j)] / norms[j] } else { tap * src[at(line, j)] };
                }
                out[at(line, i)] = if adjoint { acc } else { acc / norms[i] };
            }
        }
        out
    }

    fn blur(&self, src: &[f64], w: usize, h: usize) -> Vec<f64> {
        self.pass(&self.pass(src, w, h, 0, false), w, h, 1, false)
    }

    fn blur_adjoint(&self, src: &[f64], w: usize, h: usize) -> Vec<f64> {
        self.pass(&self.pass(src, w, h, 1, true), w, h, 0, true)
    }
}

fn channel(img: &[f64], c: usize, channels: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(channels).copied().collect()
}

/// Mean SSIM and optionally its gradient with respect to `x`.
fn ssim_impl(x: &[f64], y: &[f64], w: usize, h: usize, channels: usize, want_grad: bool) -> (f64, Vec<f64>) {
    let win = Window::new();
    let total = (w * h * channels) as f64;
    let mut sum = 0.0;
    let mut grad = if want_grad { vec![0.0; x.len()] } else { Vec::new() };
    for c in 0..channels {
        let xc = channel(x, c, channels);
        let yc = channel(y, c, channels);
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = win.blur(&xc, w, h);
        let my = win.blur(&yc, w, h);
        let exx = win.blur(&sq(&xc, &xc), w, h);
        let eyy = win.blur(&sq(&yc, &yc), w, h);
        let exy = win.blur(&sq(&xc, &yc), w, h);
        let n = w * h;
        let (mut ga, mut gb, mut gc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for p in 0..n {
            let vx = exx[p] - mx[p] * mx[p];
            let vy = eyy[p] - my[p] * my[p];
            let cxy = exy[p] - mx[p] * my[p];
            let n1 = 2.0 * mx[p] * my[p] + SSIM_C1;
            let n2 = 2.0 * cxy + SSIM_C2;
            let d1 = mx[p] * mx[p] + my[p] * my[p] + SSIM_C1;
            let d2 = vx + vy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            sum += s;
            if want_grad {
                let ds_dmx = 2.0 * my[p] * n2 / (d1 * d2) - s * 2.0 * mx[p] / d1;
                let ds_dvx = -s / d2;
                let ds_dcxy = 2.0 * n1 / (d1 * d2);
                ga[p] = ds_dmx + ds_dvx * (-2.0 * mx[p]) + ds_dcxy * (-my[p]);
                gb[p] = ds_dvx;
                gc[p] = ds_dcxy;
            }
        }
        if want_grad {
            let ta = win.blur_adjoint(&ga, w, h);
            let tb = win.blur_adjoint(&gb, w, h);
            let tc = win.blur_adjoint(&gc, w, h);
            for p in 0..n {
                grad[p * channels + c] = (ta[p] + 2.0 * xc[p] * tb[p] + yc[p] * tc[p]) / total;
            }
        }
    }
    (sum / total, grad)
}

/// Mean structural similarity of two `H x W x C` images.
pub fn ssim(pred: &[f64], gt: &[f64], width: usize, height: usize) -> Result<f64> {
    let channels = check_dims(pred, gt, width, height)?;
    Ok(ssim_impl(pred, gt, width, height, channels, false).0)
}

/// SSIM and its gradient with respect to `pred`.
pub fn ssim_with_grad(pred: &[f64], gt: &[f64], width: usize, height: usize) -> Result<(f64, Vec<f64>)> {
    let channels = check_dims(pred, gt, width, height)?;
    Ok(ssim_impl(pred, gt, width, height, channels, true))
}

/// Photometric loss `(1 - l) L1 + l (1 - SSIM)`; returns `(value, l1, ssim, grad)`.
pub fn rgb_loss(
    pred: &[f64],
    gt: &[f64],
    width: usize,
    height: usize,
    lambda_ssim: f64,
) -> Result<(f64, f64, f64, Vec<f64>)> {
    let channels = check_dims(pred, gt, width, height)?;
    let (l1, mut grad) = l1_loss(pred, gt);
    let (s, sgrad) = ssim_impl(pred, gt, width, height, channels, true);
    for (g, sg) in grad.iter_mut().zip(&sgrad) {
        *g = (1.0 - lambda_ssim) * *g - lambda_ssim * sg;
    }
    Ok(((1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s), l1, s, grad))
}

/// `sum_ij w_i w_j |t_i - t_j|` for one pixel with its gradients.
pub fn pixel_distortion(weights: &[f64], depths: &[f64], d_w: &mut [f64], d_t: &mut [f64]) -> f64 {
    let k = weights.len();
    if k < 2 {
        d_w.fill(0.0);
        d_t.fill(0.0);
        return 0.0;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| depths[a].total_cmp(&depths[b]));
    // depths relative to the nearest one, so equal depths give exactly zero
    let t0 = depths[order[0]];
    let total_w: f64 = weights.iter().sum();
    let total_wt: f64 = weights.iter().zip(depths).map(|(w, t)| w * (t - t0)).sum();
    let (mut w_before, mut wt_before) = (0.0, 0.0);
    let mut value = 0.0;
    for &i in &order {
        let (w, t) = (weights[i], depths[i] - t0);
        let w_after = total_w - w_before - w;
        let wt_after = total_wt - wt_before - w * t;
        // sum_j w_j |t_i - t_j|
        let spread = (t * w_before - wt_before) + (wt_after - t * w_after);
        value += w * spread;
        d_w[i] = 2.0 * spread;
        d_t[i] = 2.0 * w * (w_before - w_after);
        w_before += w;
        wt_before += w * t;
    }
    value
}

/// Near and far planes of the depth normalization used by [`distortion_loss`].
pub const DIST_NEAR: f64 = 0.2;
pub const DIST_FAR: f64 = 1000.0;

/// Ray depth mapped to `[0, 1)` between [`DIST_NEAR`] and [`DIST_FAR`], and its derivative.
pub fn normalized_depth(t: f64) -> (f64, f64) {
    let k = DIST_FAR / (DIST_FAR - DIST_NEAR);
    (k * (1.0 - DIST_NEAR / t), k * DIST_NEAR / (t * t))
}

/// Mean per-pixel distortion over normalized depths; gradients are with
/// respect to weights and raw ray depths, indexed like `bundle.contributions`.
pub fn distortion_loss(bundle: &FrameBundle) -> (f64, Vec<f64>, Vec<f64>) {
    let nc = bundle.contributions.len();
    let mut d_w = vec![0.0; nc];
    let mut d_t = vec![0.0; nc];
    let n = bundle.pixel_count().max(1) as f64;
    let mut total = 0.0;
    let mut ws = Vec::new();
    let mut ms = Vec::new();
    for p in 0..bundle.pixel_count() {
        let (a, b) = (bundle.contrib_start[p], bundle.contrib_start[p + 1]);
        let cs = &bundle.contributions[a..b];
        ws.clear();
        ms.clear();
        ws.extend(cs.iter().map(|c| c.weight()));
        ms.extend(cs.iter().map(|c| normalized_depth(c.t).0));
        total += pixel_distortion(&ws, &ms, &mut d_w[a..b], &mut d_t[a..b]);
        for (g, c) in d_t[a..b].iter_mut().zip(cs) {
            *g *= normalized_depth(c.t).1;
        }
    }
    d_w.iter_mut().chain(d_t.iter_mut()).for_each(|g| *g /= n);
    (total / n, d_w, d_t)
}

/// Alpha threshold below which a pixel's depth is not trusted for normals.
pub const NORMAL_MIN_ALPHA: f64 = 0.5;

/// Normals of the surface traced by the per-pixel expected depth, oriented
/// toward the camera; `None` where the finite differences are unusable.
pub fn depth_normals(bundle: &FrameBundle) -> Vec<Option<Vector3<f64>>> {
    let (w, h) = (bundle.width as usize, bundle.height as usize);
    let cam = &bundle.camera;
    let points: Vec<Option<Vector3<f64>>> = (0..w * h)
        .map(|p| {
            let a = bundle.alpha[p];
            if a < NORMAL_MIN_ALPHA {
                return None;
            }
            let ray = cam.pixel_ray((p % w) as u32, (p / w) as u32);
            Some(ray.at(bundle.depth[p] / a))
        })
        .collect();
    (0..w * h)
        .map(|p| {
            let (x, y) = (p % w, p / w);
            if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
                return None;
            }
            let dx = points[p + 1]? - points[p - 1]?;
            let dy = points[p + w]? - points[p - w]?;
            points[p]?;
            let n = dx.cross(&dy);
            let len = n.norm();
            if !(len > 1e-12) {
                return None;
            }
            let n = n / len;
            let dir = cam.pixel_ray(x as u32, y as u32).dir;
            Some(if n.dot(&dir) > 0.0 { -n } else { n })
        })
        .collect()
}

/// Mean over pixels of `alpha - n_render . n_depth`, with alpha and the depth
/// normal held constant. Returns the value and the gradient on the rendered
/// normal buffer.
pub fn normal_loss(bundle: &FrameBundle) -> (f64, Vec<f64>) {
    let n_pix = bundle.pixel_count();
    let mut grad = vec![0.0; 3 * n_pix];
    let scale = 1.0 / n_pix.max(1) as f64;
    let mut total = 0.0;
    for (p, nd) in depth_normals(bundle).into_iter().enumerate() {
        let Some(nd) = nd else { continue };
        let nr = Vector3::new(bundle.normal[3 * p], bundle.normal[3 * p + 1], bundle.normal[3 * p + 2]);
        total += bundle.alpha[p] - nr.dot(&nd);
        for a in 0..3 {
            grad[3 * p + a] = -nd[a] * scale;
        }
    }
    (total * scale, grad)
}

/// L1 on opacities; gradient is with respect to the opacity logits.
pub fn opacity_reg(logits: &[f64], sum_mode: bool) -> (f64, Vec<f64>) {
    let scale = if sum_mode { 1.0 } else { 1.0 / logits.len().max(1) as f64 };
    let mut total = 0.0;
    let grad = logits
        .iter()
        .map(|&l| {
            let o = sigmoid(l);
            total += o;
            o * (1.0 - o) * scale
        })
        .collect();
    (total * scale, grad)
}

/// Binary entropy of opacities; gradient is with respect to the logits.
pub fn bce_loss(logits: &[f64], sum_mode: bool) -> (f64, Vec<f64>) {
    let scale = if sum_mode { 1.0 } else { 1.0 / logits.len().max(1) as f64 };
    let mut total = 0.0;
    let grad = logits
        .iter()
        .map(|&l| {
            let o = sigmoid(l);
            let s = o.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total += -(s * s.ln() + (1.0 - s) * (1.0 - s).ln());
            -(s / (1.0 - s)).ln() * o * (1.0 - o) * scale
        })
        .collect();
    (total * scale, grad)
}

/// Phase-gated weighted total with gradients routed to the renderer buffers
/// and to the opacity logits.
pub struct TotalLoss {
    pub report: LossReport,
    pub frame: FrameGrads,
    pub opacity_logits: Vec<f64>,
}

pub fn total_loss(
    bundle: &FrameBundle,
    gt: &[f64],
    logits: &[f64],
    weights: &LossWeights,
    phase: Phase,
) -> Result<TotalLoss> {
    let (w, h) = (bundle.width as usize, bundle.height as usize);
    let (rgb, l1, s, rgb_grad) = rgb_loss(&bundle.rgb, gt, w, h, weights.lambda_ssim)?;
    let mut report = LossReport { rgb, l1, ssim: s, ..Default::default() };
    let mut frame = FrameGrads::from_rgb(rgb_grad);
    let mut total = rgb;

    if weights.lambda_dist > 0.0 {
        let (d, mut dw, mut dt) = distortion_loss(bundle);
        report.dist = d;
        total += weights.lambda_dist * d;
        dw.iter_mut().chain(dt.iter_mut()).for_each(|g| *g *= weights.lambda_dist);
        frame.contrib_weight = Some(dw);
        frame.contrib_t = Some(dt);
    }
    if weights.lambda_normal > 0.0 {
        let (nv, mut ng) = normal_loss(bundle);
        report.normal = nv;
        total += weights.lambda_normal * nv;
        ng.iter_mut().for_each(|g| *g *= weights.lambda_normal);
        frame.normal = Some(ng);
    }
    let mut opacity_logits = vec![0.0; logits.len()];
    if phase != Phase::Warmup && weights.lambda_opacity > 0.0 {
        let (v, g) = opacity_reg(logits, weights.sum_mode);
        report.opacity = v;
        total += weights.lambda_opacity * v;
        for (o, gi) in opacity_logits.iter_mut().zip(g) {
            *o += weights.lambda_opacity * gi;
        }
    }
    if phase == Phase::Bce && weights.lambda_bce > 0.0 {
        let (v, g) = bce_loss(logits, weights.sum_mode);
        report.bce = v;
        total += weights.lambda_bce * v;
        for (o, gi) in opacity_logits.iter_mut().zip(g) {
            *o += weights.lambda_bce * gi;
        }
    }
    report.total = total;
    Ok(TotalLoss { report, frame, opacity_logits })
}
