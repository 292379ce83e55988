use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::raster::{bin_and_sort, tile_pixels, Scene};
use super::{ColorMode, FeatureMask, FrameBundle};
use crate::field::{sh_encode, Activations, Decoder, HashGrid, SH_DIM};
use crate::geometry::{splat_frame_backward, SurfelCloud};

/// Upstream gradients of a loss with respect to a [`FrameBundle`]'s buffers.
#[derive(Clone, Debug, Default)]
pub struct FrameGrads {
    /// `H x W x 3`.
    pub rgb: Vec<f64>,
    pub alpha: Option<Vec<f64>>,
    pub depth: Option<Vec<f64>>,
    /// `H x W x 3`.
    pub normal: Option<Vec<f64>>,
    /// One entry per contribution, indexed like `FrameBundle::contributions`.
    pub contrib_weight: Option<Vec<f64>>,
    pub contrib_t: Option<Vec<f64>>,
}

impl FrameGrads {
    pub fn from_rgb(rgb: Vec<f64>) -> Self {
        FrameGrads { rgb, ..Default::default() }
    }

    pub fn zeros(bundle: &FrameBundle) -> Self {
        FrameGrads::from_rgb(vec![0.0; 3 * bundle.pixel_count()])
    }
}

/// Parameter gradients, laid out like the arrays they differentiate.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads {
    pub positions: Vec<f64>,
    pub rotations: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub betas: Vec<f64>,
    pub latents: Vec<f64>,
    pub table: Vec<f64>,
    pub decoder: Vec<f64>,
}

impl RenderGrads {
    pub fn zeros(cloud: &SurfelCloud, grid: &HashGrid, decoder: &Decoder) -> Self {
        RenderGrads {
            positions: vec![0.0; cloud.positions.len()],
            rotations: vec![0.0; cloud.rotations.len()],
            log_scales: vec![0.0; cloud.log_scales.len()],
            opacity_logits: vec![0.0; cloud.len()],
            betas: vec![0.0; cloud.len()],
            latents: vec![0.0; cloud.latents.len()],
            table: vec![0.0; grid.table.len()],
            decoder: vec![0.0; decoder.params.len()],
        }
    }
}

struct GeomRecord {
    index: usize,
    d_mu: Vector3<f64>,
    /// Columns: tangent u, tangent v, normal.
    d_frame: Matrix3<f64>,
    d_log_scale: [f64; 2],
    d_opacity_logit: f64,
    d_beta: f64,
}

#[derive(Default)]
struct TileGrads {
    records: Vec<GeomRecord>,
    /// `latent_dim` values per record.
    latents: Vec<f64>,
    hash_x: Vec<Vector3<f64>>,
    /// `grid.output_dim()` values per entry of `hash_x`.
    hash_g: Vec<f64>,
    decoder: Vec<f64>,
}

struct Scratch {
    acts: Activations,
    input: Vec<f64>,
    grad_input: Vec<f64>,
    g_feat: Vec<f64>,
    dc: Vec<f64>,
}

/// Reverse pass of [`super::render`]. The bundle must come from a render with
/// `save_for_backward` set, over the same cloud, grid and decoder.
pub fn render_backward(
    bundle: &FrameBundle,
    cloud: &SurfelCloud,
    grid: &HashGrid,
    decoder: &Decoder,
    grads: &FrameGrads,
) -> RenderGrads {
    let cfg = &bundle.config;
    assert!(cfg.save_for_backward, "bundle was rendered without save_for_backward");
    assert_eq!(bundle.surfel_count, cloud.len(), "cloud changed since the forward pass");
    let n = bundle.pixel_count();
    assert_eq!(grads.rgb.len(), 3 * n, "rgb gradient shape");
    let nc = bundle.contributions.len();
    for (name, len, want) in [
        ("alpha", grads.alpha.as_ref().map(Vec::len), n),
        ("depth", grads.depth.as_ref().map(Vec::len), n),
        ("normal", grads.normal.as_ref().map(Vec::len), 3 * n),
        ("contrib_weight", grads.contrib_weight.as_ref().map(Vec::len), nc),
        ("contrib_t", grads.contrib_t.as_ref().map(Vec::len), nc),
    ] {
        if let Some(len) = len {
            assert_eq!(len, want, "{name} gradient shape");
        }
    }

    let scene = Scene::new(cloud, grid, decoder, &bundle.camera, cfg);
    // Only the tile geometry is needed here; it matches the forward binning.
    let bins = bin_and_sort(cloud, &bundle.camera, cfg);
    let tiles: Vec<TileGrads> = (0..bins.tile_count())
        .into_par_iter()
        .map(|t| {
            let mut out = TileGrads { decoder: vec![0.0; decoder.params.len()], ..Default::default() };
            let mut scratch = Scratch {
                acts: Activations::default(),
                input: Vec::new(),
                grad_input: vec![0.0; decoder.input_dim()],
                g_feat: Vec::new(),
                dc: Vec::new(),
            };
            for (x, y) in tile_pixels(&bundle.camera, &bins, t) {
                let p = (y * bundle.width + x) as usize;
                pixel_backward(&scene, bundle, grads, p, x, y, &mut out, &mut scratch);
            }
            out
        })
        .collect();

    let mut result = RenderGrads::zeros(cloud, grid, decoder);
    let dg = cloud.latent_dim;
    let dh = grid.output_dim();
    let mut d_frames = vec![Matrix3::<f64>::zeros(); cloud.len()];
    for tile in &tiles {
        for (k, r) in tile.records.iter().enumerate() {
            let i = r.index;
            for a in 0..3 {
                result.positions[3 * i + a] += r.d_mu[a];
            }
            d_frames[i] += r.d_frame;
            result.log_scales[2 * i] += r.d_log_scale[0];
            result.log_scales[2 * i + 1] += r.d_log_scale[1];
            result.opacity_logits[i] += r.d_opacity_logit;
            result.betas[i] += r.d_beta;
            for (g, &v) in result.latents[i * dg..(i + 1) * dg].iter_mut().zip(&tile.latents[k * dg..(k + 1) * dg]) {
                *g += v;
            }
        }
        for (k, x) in tile.hash_x.iter().enumerate() {
            grid.accumulate_table_grad(x, &tile.hash_g[k * dh..(k + 1) * dh], &mut result.table);
        }
        for (g, &v) in result.decoder.iter_mut().zip(&tile.decoder) {
            *g += v;
        }
    }
    for (i, d) in d_frames.iter().enumerate() {
        if *d == Matrix3::zeros() {
            continue;
        }
        let dq = splat_frame_backward(&cloud.rotation(i), d);
        result.rotations[4 * i..4 * i + 4].copy_from_slice(&dq);
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn pixel_backward(
    scene: &Scene,
    bundle: &FrameBundle,
    grads: &FrameGrads,
    p: usize,
    px: u32,
    py: u32,
    out: &mut TileGrads,
    s: &mut Scratch,
) {
    let contribs = bundle.pixel_contributions(p);
    if contribs.is_empty() {
        return;
    }
    let cfg = scene.cfg;
    let fd = bundle.feature_dim;
    let dg = scene.latent_dim();
    let ray = bundle.camera.pixel_ray(px, py);
    let a = bundle.alpha[p];
    let bg = cfg.background;
    let g_rgb = &grads.rgb[3 * p..3 * p + 3];
    let mut g_alpha = grads.alpha.as_ref().map_or(0.0, |g| g[p]);

    s.g_feat.clear();
    s.g_feat.resize(fd, 0.0);
    match cfg.color_mode {
        ColorMode::Neural => {
            s.input.clear();
            s.input.extend_from_slice(bundle.pixel_feature(p));
            s.input.extend_from_slice(&sh_encode(&ray.dir));
            let y = scene.decoder.forward(&s.input, &mut s.acts);
            let g_y = [a * g_rgb[0], a * g_rgb[1], a * g_rgb[2]];
            g_alpha += (0..3).map(|c| (y[c] - bg[c]) * g_rgb[c]).sum::<f64>();
            scene.decoder.backward(&s.acts, &g_y, &mut out.decoder, &mut s.grad_input);
            s.g_feat.copy_from_slice(&s.grad_input[..fd]);
            debug_assert_eq!(s.grad_input.len(), fd + SH_DIM);
        }
        ColorMode::Direct => {
            s.g_feat.copy_from_slice(g_rgb);
            g_alpha -= (0..3).map(|c| bg[c] * g_rgb[c]).sum::<f64>();
        }
    }
    let g_depth = grads.depth.as_ref().map_or(0.0, |g| g[p]);
    let g_normal = grads
        .normal
        .as_ref()
        .map_or(Vector3::zeros(), |g| Vector3::new(g[3 * p], g[3 * p + 1], g[3 * p + 2]));
    let base = bundle.contrib_start[p];
    let feats = &bundle.contrib_features[base * fd..(base + contribs.len()) * fd];
    let dir_fwd = ray.dir.dot(&scene.forward);
    let kernel = cfg.kernel;
    let hash_live = cfg.color_mode == ColorMode::Neural && cfg.mask != FeatureMask::SurfelOnly && fd > dg;
    let latent_live = cfg.color_mode == ColorMode::Direct || cfg.mask != FeatureMask::HashOnly;

    // Suffix sum of the weighted per-contribution signals behind the current one.
    let mut behind = 0.0;
    for k in (0..contribs.len()).rev() {
        let c = &contribs[k];
        let idx = c.index as usize;
        let feat = &feats[k * fd..(k + 1) * fd];
        let (n_used, flip) = scene.facing_normal(idx, &ray.dir);
        let gw = grads.contrib_weight.as_ref().map_or(0.0, |g| g[base + k]);
        let gt_ext = grads.contrib_t.as_ref().map_or(0.0, |g| g[base + k]);
        let e = feat.iter().zip(&s.g_feat).map(|(f, g)| f * g).sum::<f64>()
            + g_depth * c.t
            + n_used.dot(&g_normal)
            + g_alpha
            + gw;
        let d_alpha = c.transmittance * (e - behind);
        behind = c.alpha * e + (1.0 - c.alpha) * behind;
        let w = c.weight();

        let Some((_, x, uv, r2)) = scene.accept_hit(idx, &ray, dir_fwd) else {
            continue;
        };
        let sp = &scene.prepared[idx];
        let frame = &sp.frame;

        // feature gradient w.r.t. this contribution's unblended feature
        s.dc.clear();
        s.dc.extend(s.g_feat.iter().map(|g| w * g));
        let mut dx = Vector3::zeros();
        if hash_live {
            let dh = &s.dc[dg..];
            dx += scene.grid.spatial_grad(&x, dh);
            out.hash_x.push(x);
            out.hash_g.extend_from_slice(dh);
        }
        let latent_start = out.latents.len();
        out.latents.resize(latent_start + dg, 0.0);
        if latent_live {
            let dl = &mut out.latents[latent_start..];
            match cfg.color_mode {
                ColorMode::Neural => dl.copy_from_slice(&s.dc[..dg]),
                ColorMode::Direct => {
                    for j in 0..3 {
                        dl[j] = s.dc[j] * feat[j] * (1.0 - feat[j]);
                    }
                }
            }
        }

        let o = sp.opacity;
        let (g, g_r2, g_b) = kernel.eval_grad(r2, sp.beta, cfg.kappa);
        let d_opacity_logit = d_alpha * g * o * (1.0 - o);
        let d_g = d_alpha * o;
        let d_r2 = d_g * g_r2;
        let d_beta = d_g * g_b;
        let an = uv[0] * sp.inv_extent[0];
        let bn = uv[1] * sp.inv_extent[1];
        let du = d_r2 * 2.0 * an * sp.inv_extent[0];
        let dv = d_r2 * 2.0 * bn * sp.inv_extent[1];
        let d_log_scale = [-2.0 * an * an * d_r2, -2.0 * bn * bn * d_r2];

        let rel = x - sp.position;
        let d_rel = frame.tangent_u * du + frame.tangent_v * dv;
        dx += d_rel;
        let denom = frame.normal.dot(&ray.dir);
        let dt = w * g_depth + gt_ext + dx.dot(&ray.dir);
        let d_mu = -d_rel + frame.normal * (dt / denom);
        let d_n = -rel * (dt / denom) + flip * w * g_normal;
        let mut d_frame = Matrix3::zeros();
        d_frame.set_column(0, &(rel * du));
        d_frame.set_column(1, &(rel * dv));
        d_frame.set_column(2, &d_n);
        out.records.push(GeomRecord { index: idx, d_mu, d_frame, d_log_scale, d_opacity_logit, d_beta });
    }
}
