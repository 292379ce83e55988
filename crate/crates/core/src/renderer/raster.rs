use nalgebra::Vector3;
use rayon::prelude::*;

use super::{ColorMode, Contribution, FeatureMask, FrameBundle, RenderConfig};
use crate::field::{sh_encode, Activations, Decoder, HashGrid, SH_DIM};
use crate::geometry::{project_aabb, sigmoid, PreparedSurfel, Ray, Surfel, SurfelCloud};
use crate::renderer::Camera;

/// Per-tile surfel lists in compressed-row form, each list depth-sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct TileBins {
    pub tile_size: u32,
    pub tiles_x: u32,
    pub tiles_y: u32,
    pub offsets: Vec<usize>,
    pub indices: Vec<u32>,
}

impl TileBins {
    pub fn tile_count(&self) -> usize {
        (self.tiles_x * self.tiles_y) as usize
    }

    pub fn tile(&self, t: usize) -> &[u32] {
        &self.indices[self.offsets[t]..self.offsets[t + 1]]
    }

    pub fn tile_of_pixel(&self, px: u32, py: u32) -> usize {
        ((py / self.tile_size) * self.tiles_x + px / self.tile_size) as usize
    }
}

fn geometry_only(cloud: &SurfelCloud, i: usize) -> Surfel {
    Surfel {
        position: cloud.position(i),
        rotation: cloud.rotation(i),
        scale: [cloud.log_scales[2 * i].exp(), cloud.log_scales[2 * i + 1].exp()],
        opacity_logit: cloud.opacity_logits[i],
        beta: cloud.betas[i],
        latent: Vec::new(),
    }
}

/// Storage-independent ordering key: camera depth of the center, then a hash
/// of the surfel's position and rotation bits.
pub fn sort_key(cloud: &SurfelCloud, camera: &Camera, i: usize) -> (f64, u64) {
    let depth = camera.depth_of(&cloud.position(i));
    // FNV-1a over the raw bits
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let words = cloud.positions[3 * i..3 * i + 3]
        .iter()
        .chain(&cloud.rotations[4 * i..4 * i + 4]);
    for v in words {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    (depth, h)
}

/// Visible surfels in compositing order.
pub(crate) fn sorted_visible(cloud: &SurfelCloud, camera: &Camera, cfg: &RenderConfig) -> Vec<(u32, [u32; 2], [u32; 2])> {
    let mut visible: Vec<(f64, u64, u32, [u32; 2], [u32; 2])> = (0..cloud.len())
        .filter_map(|i| {
            let rect = project_aabb(&geometry_only(cloud, i), camera, cfg.kappa)?;
            let (xr, yr) = rect.pixel_range(camera.width, camera.height)?;
            let (depth, hash) = sort_key(cloud, camera, i);
            Some((depth, hash, i as u32, xr, yr))
        })
        .collect();
    visible.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    visible.into_iter().map(|(_, _, i, xr, yr)| (i, xr, yr)).collect()
}

/// Lists, for every screen tile, the surfels whose projected support
/// rectangle overlaps it, in ascending (depth, hash, index) order.
pub fn bin_and_sort(cloud: &SurfelCloud, camera: &Camera, cfg: &RenderConfig) -> TileBins {
    let ts = cfg.tile_size;
    let tiles_x = camera.width.div_ceil(ts);
    let tiles_y = camera.height.div_ceil(ts);
    let n_tiles = (tiles_x * tiles_y) as usize;
    let order = sorted_visible(cloud, camera, cfg);

    let tile_span = |xr: [u32; 2], yr: [u32; 2]| (xr[0] / ts..=xr[1] / ts, yr[0] / ts..=yr[1] / ts);
    let mut counts = vec![0usize; n_tiles + 1];
    for &(_, xr, yr) in &order {
        let (tx, ty) = tile_span(xr, yr);
        for y in ty {
            for x in tx.clone() {
                counts[(y * tiles_x + x) as usize + 1] += 1;
            }
        }
    }
    for t in 0..n_tiles {
        counts[t + 1] += counts[t];
    }
    let offsets = counts;
    let mut cursor = offsets.clone();
    let mut indices = vec![0u32; offsets[n_tiles]];
    for &(i, xr, yr) in &order {
        let (tx, ty) = tile_span(xr, yr);
        for y in ty {
            for x in tx.clone() {
                let t = (y * tiles_x + x) as usize;
                indices[cursor[t]] = i;
                cursor[t] += 1;
            }
        }
    }
    TileBins { tile_size: ts, tiles_x, tiles_y, offsets, indices }
}

/// Immutable per-render state shared by all tiles.
pub(crate) struct Scene<'a> {
    pub cloud: &'a SurfelCloud,
    pub grid: &'a HashGrid,
    pub decoder: &'a Decoder,
    pub camera: &'a Camera,
    pub cfg: &'a RenderConfig,
    pub prepared: Vec<PreparedSurfel>,
    pub forward: Vector3<f64>,
}

impl<'a> Scene<'a> {
    pub fn new(
        cloud: &'a SurfelCloud,
        grid: &'a HashGrid,
        decoder: &'a Decoder,
        camera: &'a Camera,
        cfg: &'a RenderConfig,
    ) -> Self {
        let prepared = (0..cloud.len())
            .map(|i| PreparedSurfel::new(&geometry_only(cloud, i), cfg.kappa))
            .collect();
        Scene { cloud, grid, decoder, camera, cfg, prepared, forward: camera.forward() }
    }

    pub fn latent_dim(&self) -> usize {
        self.cloud.latent_dim
    }

    pub fn feature_dim(&self) -> usize {
        match self.cfg.color_mode {
            ColorMode::Neural => self.cloud.latent_dim + self.grid.output_dim(),
            ColorMode::Direct => 3,
        }
    }

    /// Unblended feature of surfel `idx` hit at `x`.
    #[inline]
    pub fn contribution_feature(&self, idx: usize, x: &Vector3<f64>, out: &mut [f64]) {
        let latent = self.cloud.latent(idx);
        match self.cfg.color_mode {
            ColorMode::Direct => {
                for c in 0..3 {
                    out[c] = sigmoid(latent[c]);
                }
            }
            ColorMode::Neural => {
                let dg = latent.len();
                let (base, hash) = out.split_at_mut(dg);
                if self.cfg.mask == FeatureMask::HashOnly {
                    base.fill(0.0);
                } else {
                    base.copy_from_slice(latent);
                }
                if self.cfg.mask == FeatureMask::SurfelOnly {
                    hash.fill(0.0);
                } else if !hash.is_empty() {
                    self.grid.sample_into(x, hash);
                }
            }
        }
    }

    /// Surfel normal flipped to face against the ray.
    #[inline]
    pub fn facing_normal(&self, idx: usize, dir: &Vector3<f64>) -> (Vector3<f64>, f64) {
        let n = self.prepared[idx].frame.normal;
        if n.dot(dir) > 0.0 {
            (-n, -1.0)
        } else {
            (n, 1.0)
        }
    }

    /// Hit of surfel `idx` accepted by the compositor: inside the support and
    /// between the camera's near and far planes.
    #[inline]
    pub fn accept_hit(&self, idx: usize, ray: &Ray, dir_fwd: f64) -> Option<(f64, Vector3<f64>, [f64; 2], f64)> {
        let hit = self.prepared[idx].hit(ray)?;
        let z = hit.0 * dir_fwd;
        if z < self.camera.near || z > self.camera.far {
            return None;
        }
        Some(hit)
    }

    pub fn composite(&self, ray: &Ray, list: &[u32], save: bool, px: &mut PixelScratch) {
        let fd = self.feature_dim();
        px.reset(fd);
        let dir_fwd = ray.dir.dot(&self.forward);
        let kernel = self.cfg.kernel;
        let kappa = self.cfg.kappa;
        let mut trans = 1.0;
        for (k, &idx) in list.iter().enumerate() {
            let idx_us = idx as usize;
            let Some((t, x, _uv, r2)) = self.accept_hit(idx_us, ray, dir_fwd) else {
                continue;
            };
            let s = &self.prepared[idx_us];
            let alpha = s.opacity * kernel.eval(r2, s.beta, kappa);
            if !(alpha > 0.0) {
                continue;
            }
            let w = trans * alpha;
            self.contribution_feature(idx_us, &x, &mut px.cfeat);
            for (f, &c) in px.feature.iter_mut().zip(&px.cfeat) {
                *f += w * c;
            }
            px.depth += w * t;
            px.normal += self.facing_normal(idx_us, &ray.dir).0 * w;
            px.contributions.push(Contribution { index: idx, alpha, transmittance: trans, t });
            if save {
                px.contrib_features.extend_from_slice(&px.cfeat);
            }
            trans *= 1.0 - alpha;
            if trans < self.cfg.t_floor {
                px.skipped = list.len() - k - 1;
                break;
            }
        }
        px.transmittance = trans;
    }

    /// Pixel colour from a finished composite.
    pub fn shade(&self, dir: &Vector3<f64>, px: &PixelScratch, input: &mut Vec<f64>, acts: &mut Activations) -> [f64; 3] {
        let bg = self.cfg.background;
        let trans = px.transmittance;
        match self.cfg.color_mode {
            ColorMode::Direct => std::array::from_fn(|c| px.feature[c] + trans * bg[c]),
            ColorMode::Neural => {
                if px.contributions.is_empty() {
                    return bg;
                }
                input.clear();
                input.extend_from_slice(&px.feature);
                input.extend_from_slice(&sh_encode(dir));
                let y = self.decoder.forward(input, acts);
                let a = 1.0 - trans;
                std::array::from_fn(|c| y[c] * a + bg[c] * (1.0 - a))
            }
        }
    }
}

#[derive(Default)]
pub(crate) struct PixelScratch {
    pub feature: Vec<f64>,
    pub cfeat: Vec<f64>,
    pub depth: f64,
    pub normal: Vector3<f64>,
    pub transmittance: f64,
    pub contributions: Vec<Contribution>,
    pub contrib_features: Vec<f64>,
    pub skipped: usize,
}

impl PixelScratch {
    fn reset(&mut self, fd: usize) {
        self.feature.clear();
        self.feature.resize(fd, 0.0);
        self.cfeat.resize(fd, 0.0);
        self.depth = 0.0;
        self.normal = Vector3::zeros();
        self.transmittance = 1.0;
        self.contributions.clear();
        self.contrib_features.clear();
        self.skipped = 0;
    }
}

/// Result of compositing a single ray.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelComposite {
    pub feature: Vec<f64>,
    pub alpha: f64,
    pub transmittance: f64,
    pub depth: f64,
    pub normal: Vector3<f64>,
    pub contributions: Vec<Contribution>,
}

/// Front-to-back blend of hybrid features along one ray over `sorted`
/// surfels (already in compositing order).
pub fn composite_pixel(
    ray: &Ray,
    sorted: &[u32],
    cloud: &SurfelCloud,
    grid: &HashGrid,
    camera: &Camera,
    cfg: &RenderConfig,
) -> PixelComposite {
    // The decoder is not consulted while compositing.
    let decoder = Decoder::zeros(&[1, 3]).expect("static widths");
    let scene = Scene::new(cloud, grid, &decoder, camera, cfg);
    let mut px = PixelScratch::default();
    scene.composite(ray, sorted, false, &mut px);
    PixelComposite {
        feature: px.feature,
        alpha: 1.0 - px.transmittance,
        transmittance: px.transmittance,
        depth: px.depth,
        normal: px.normal,
        contributions: px.contributions,
    }
}

struct TileOutput {
    /// Row-major pixel indices covered by the tile.
    pixels: Vec<usize>,
    rgb: Vec<[f64; 3]>,
    transmittance: Vec<f64>,
    depth: Vec<f64>,
    normal: Vec<Vector3<f64>>,
    feature: Vec<f64>,
    contrib_counts: Vec<usize>,
    contributions: Vec<Contribution>,
    contrib_features: Vec<f64>,
    skipped: u64,
}

pub(crate) fn tile_pixels(camera: &Camera, bins: &TileBins, t: usize) -> impl Iterator<Item = (u32, u32)> {
    let ts = bins.tile_size;
    let tx = t as u32 % bins.tiles_x;
    let ty = t as u32 / bins.tiles_x;
    let (x0, y0) = (tx * ts, ty * ts);
    let (x1, y1) = ((x0 + ts).min(camera.width), (y0 + ts).min(camera.height));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

fn render_tile(scene: &Scene, bins: &TileBins, t: usize) -> TileOutput {
    let fd = scene.feature_dim();
    let save = scene.cfg.save_for_backward;
    let list = bins.tile(t);
    let mut out = TileOutput {
        pixels: Vec::new(),
        rgb: Vec::new(),
        transmittance: Vec::new(),
        depth: Vec::new(),
        normal: Vec::new(),
        feature: Vec::new(),
        contrib_counts: Vec::new(),
        contributions: Vec::new(),
        contrib_features: Vec::new(),
        skipped: 0,
    };
    let mut px = PixelScratch::default();
    let mut input = Vec::with_capacity(fd + SH_DIM);
    let mut acts = Activations::default();
    for (x, y) in tile_pixels(scene.camera, bins, t) {
        let ray = scene.camera.pixel_ray(x, y);
        scene.composite(&ray, list, save, &mut px);
        let rgb = scene.shade(&ray.dir, &px, &mut input, &mut acts);
        out.pixels.push((y * scene.camera.width + x) as usize);
        out.rgb.push(rgb);
        out.transmittance.push(px.transmittance);
        out.depth.push(px.depth);
        out.normal.push(px.normal);
        out.feature.extend_from_slice(&px.feature);
        out.contrib_counts.push(px.contributions.len());
        out.contributions.extend_from_slice(&px.contributions);
        out.contrib_features.extend_from_slice(&px.contrib_features);
        out.skipped += px.skipped as u64;
    }
    debug_assert_eq!(out.feature.len(), out.pixels.len() * fd);
    out
}

/// Renders all buffers of one view.
pub fn render(
    cloud: &SurfelCloud,
    grid: &HashGrid,
    decoder: &Decoder,
    camera: &Camera,
    cfg: &RenderConfig,
) -> FrameBundle {
    let scene = Scene::new(cloud, grid, decoder, camera, cfg);
    let fd = scene.feature_dim();
    if cfg.color_mode == ColorMode::Neural {
        assert_eq!(decoder.input_dim(), fd + SH_DIM, "decoder input width");
    } else {
        assert!(cloud.latent_dim >= 3 || cloud.is_empty(), "direct colour needs 3 latent slots");
    }
    let bins = bin_and_sort(cloud, camera, cfg);
    let tiles: Vec<TileOutput> = (0..bins.tile_count())
        .into_par_iter()
        .map(|t| render_tile(&scene, &bins, t))
        .collect();

    let n = camera.pixel_count();
    let mut bundle = FrameBundle {
        width: camera.width,
        height: camera.height,
        rgb: vec![0.0; 3 * n],
        alpha: vec![0.0; n],
        depth: vec![0.0; n],
        normal: vec![0.0; 3 * n],
        blends: vec![0; n],
        feature_dim: fd,
        features: vec![0.0; fd * n],
        contrib_start: vec![0; n + 1],
        contributions: Vec::new(),
        contrib_features: Vec::new(),
        queries_saved: 0,
        camera: camera.clone(),
        config: cfg.clone(),
        surfel_count: cloud.len(),
    };
    // (tile, local pixel, local contribution offset) per pixel, for the
    // pixel-major re-layout of the contribution lists
    let mut locate = vec![(0usize, 0usize, 0usize); n];
    for (t, tile) in tiles.iter().enumerate() {
        let mut off = 0;
        for (k, &p) in tile.pixels.iter().enumerate() {
            let rgb = tile.rgb[k];
            bundle.rgb[3 * p..3 * p + 3].copy_from_slice(&rgb);
            bundle.alpha[p] = 1.0 - tile.transmittance[k];
            bundle.depth[p] = tile.depth[k];
            bundle.normal[3 * p..3 * p + 3].copy_from_slice(tile.normal[k].as_slice());
            bundle.blends[p] = tile.contrib_counts[k] as u32;
            bundle.features[p * fd..(p + 1) * fd].copy_from_slice(&tile.feature[k * fd..(k + 1) * fd]);
            locate[p] = (t, k, off);
            off += tile.contrib_counts[k];
        }
        bundle.queries_saved += tile.skipped;
    }
    let total: usize = tiles.iter().map(|t| t.contributions.len()).sum();
    bundle.contributions.reserve(total);
    if cfg.save_for_backward {
        bundle.contrib_features.reserve(total * fd);
    }
    for p in 0..n {
        let (t, k, off) = locate[p];
        let cnt = tiles[t].contrib_counts[k];
        bundle.contrib_start[p] = bundle.contributions.len();
        bundle.contributions.extend_from_slice(&tiles[t].contributions[off..off + cnt]);
        if cfg.save_for_backward {
            bundle.contrib_features.extend_from_slice(&tiles[t].contrib_features[off * fd..(off + cnt) * fd]);
        }
    }
    bundle.contrib_start[n] = bundle.contributions.len();
    bundle
}

/// Same pipeline with one slice of every contribution's feature zeroed.
pub fn render_decomposed(
    cloud: &SurfelCloud,
    grid: &HashGrid,
    decoder: &Decoder,
    camera: &Camera,
    cfg: &RenderConfig,
    mask: FeatureMask,
) -> FrameBundle {
    let cfg = RenderConfig { mask, ..cfg.clone() };
    render(cloud, grid, decoder, camera, &cfg)
}
