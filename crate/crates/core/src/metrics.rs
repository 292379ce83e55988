//! Image metrics, render timing and point-set distance.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dataio::View;
use crate::field::{Decoder, HashGrid};
use crate::geometry::SurfelCloud;
pub use crate::losses::ssim;
use crate::renderer::{blend_stats, render, BlendStats, Camera, RenderConfig};
use crate::{Error, Result};

/// `10 log10(1 / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!("images have {} and {} values", pred.len(), gt.len())));
    }
    let mse = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Symmetric chamfer distance: the average of the two mean nearest-neighbour
/// distances. Brute force.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("chamfer distance needs two non-empty point sets".into()));
    }
    let one_way = |from: &[Vector3<f64>], to: &[Vector3<f64>]| {
        from.iter()
            .map(|p| to.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (one_way(a, b) + one_way(b, a)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub frames: usize,
    pub blends: BlendStats,
    pub n_surfels: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Wall-clock per frame over `repeats` passes through `cameras`, after one
/// untimed render.
pub fn bench_render(
    cloud: &SurfelCloud,
    grid: &HashGrid,
    decoder: &Decoder,
    cameras: &[Camera],
    cfg: &RenderConfig,
    repeats: usize,
) -> Result<BenchReport> {
    let first = cameras.first().ok_or_else(|| Error::Empty("no cameras to benchmark".into()))?;
    // Untimed pass over every view so caches and allocator pools are warm.
    let blends = blend_stats(&render(cloud, grid, decoder, first, cfg));
    for cam in &cameras[1..] {
        std::hint::black_box(render(cloud, grid, decoder, cam, cfg));
    }
    let mut times = Vec::with_capacity(repeats.max(1) * cameras.len());
    for _ in 0..repeats.max(1) {
        for cam in cameras {
            let t0 = Instant::now();
            let frame = render(cloud, grid, decoder, cam, cfg);
            times.push(t0.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(&frame);
        }
    }
    let (min_ms, max_ms) = times.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &t| (lo.min(t), hi.max(t)));
    Ok(BenchReport { median_ms: median(&mut times), min_ms, max_ms, frames: times.len(), blends, n_surfels: cloud.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mean_blends: f64,
    pub render_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub blends: BlendStats,
    pub n_surfels: usize,
    pub median_render_ms: f64,
}

/// Renders every view and scores it against its image.
pub fn evaluate(
    cloud: &SurfelCloud,
    grid: &HashGrid,
    decoder: &Decoder,
    views: &[View],
    cfg: &RenderConfig,
) -> Result<EvalReport> {
    if views.is_empty() {
        return Err(Error::Empty("no views to evaluate".into()));
    }
    let mut out = Vec::with_capacity(views.len());
    let mut all_blends = Vec::new();
    let mut saved = 0;
    for v in views {
        let t0 = Instant::now();
        let frame = render(cloud, grid, decoder, &v.camera, cfg);
        let render_ms = t0.elapsed().as_secs_f64() * 1e3;
        let (w, h) = (v.camera.width as usize, v.camera.height as usize);
        let stats = blend_stats(&frame);
        all_blends.extend_from_slice(&frame.blends);
        saved += frame.queries_saved;
        out.push(ViewMetrics {
            name: v.name.clone(),
            psnr: psnr(&frame.rgb, &v.image)?,
            ssim: ssim(&frame.rgb, &v.image, w, h)?,
            mean_blends: stats.mean,
            render_ms,
        });
    }
    let n = out.len() as f64;
    let mut times: Vec<f64> = out.iter().map(|m| m.render_ms).collect();
    all_blends.sort_unstable();
    let k = all_blends.len();
    let pct = |q: f64| all_blends[((q * (k - 1) as f64).round() as usize).min(k - 1)] as f64;
    let blends = BlendStats {
        mean: all_blends.iter().map(|&b| b as f64).sum::<f64>() / k as f64,
        p50: pct(0.5),
        p95: pct(0.95),
        queries_saved: saved,
    };
    Ok(EvalReport {
        mean_psnr: out.iter().map(|m| m.psnr).sum::<f64>() / n,
        mean_ssim: out.iter().map(|m| m.ssim).sum::<f64>() / n,
        views: out,
        blends,
        n_surfels: cloud.len(),
        median_render_ms: median(&mut times),
    })
}

impl EvalReport {
    /// Fixed-width text table, one row per view plus the means.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>9} {:>7} {:>8} {:>9}", "view", "psnr", "ssim", "blends", "ms");
        for v in &self.views {
            let _ = writeln!(
                s,
                "{:<24} {:>9.4} {:>7.4} {:>8.2} {:>9.3}",
                v.name, v.psnr, v.ssim, v.mean_blends, v.render_ms
            );
        }
        let _ = writeln!(
            s,
            "{:<24} {:>9.4} {:>7.4} {:>8.2} {:>9.3}",
            "mean", self.mean_psnr, self.mean_ssim, self.blends.mean, self.median_render_ms
        );
        let _ = writeln!(
            s,
            "surfels {}  blends p50 {} p95 {}  skipped queries {}",
            self.n_surfels, self.blends.p50, self.blends.p95, self.blends.queries_saved
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_values() {
        let a = vec![0.25; 30];
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = vec![0.35; 30];
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b[..29]).is_err());
    }

    #[test]
    fn psnr_matches_direct_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..300).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..300).map(|_| rng.random()).collect();
        let mut mse = 0.0;
        for i in 0..300 {
            mse += (a[i] - b[i]).powi(2);
        }
        mse /= 300.0;
        assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base: Vec<f64> = (0..3000).map(|_| rng.random_range(0.2..0.8)).collect();
        let noise: Vec<f64> = (0..3000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vals: Vec<f64> = [0.01, 0.05, 0.15]
            .iter()
            .map(|amp| {
                let noisy: Vec<f64> = base.iter().zip(&noise).map(|(b, n)| b + amp * n).collect();
                psnr(&noisy, &base).unwrap()
            })
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2]);
    }

    #[test]
    fn ssim_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random()).collect();
        assert_eq!(ssim(&x, &x, 16, 16).unwrap(), 1.0);
        let anti: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&x, &anti, 16, 16).unwrap() < 0.5);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (a, b) = (0.3, 0.7);
        let x = vec![a; 20 * 20 * 3];
        let y = vec![b; 20 * 20 * 3];
        let c1 = crate::losses::SSIM_C1;
        let expect = (2.0 * a * b + c1) / (a * a + b * b + c1);
        assert!((ssim(&x, &y, 20, 20).unwrap() - expect).abs() < 1e-9);
    }

    fn bench_scene(n: usize) -> (SurfelCloud, HashGrid, Decoder, Camera) {
        use crate::field::GridConfig;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cloud = SurfelCloud::new(3);
        for _ in 0..n {
            cloud.push(&crate::geometry::Surfel {
                position: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)),
                rotation: [1.0, 0.0, 0.0, 0.0],
                scale: [0.08, 0.08],
                opacity_logit: 0.0,
                beta: 0.0,
                latent: vec![0.0; 3],
            });
        }
        let grid = HashGrid::zeros(&GridConfig { levels: 1, base_resolution: 4, max_resolution: 4, log2_table_size: 6, feat_dim: 2, init_range: 0.0 }, Vector3::from([-1.5; 3]), Vector3::from([1.5; 3])).unwrap();
        let decoder = Decoder::zeros(&[3 + 2 + crate::field::SH_DIM, 3]).unwrap();
        let cam = Camera::look_at(48, 48, 40.0, 40.0, Vector3::new(0.0, 0.0, 3.0), Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0));
        (cloud, grid, decoder, cam)
    }

    #[test]
    fn bench_single_repeat_and_relative_cost() {
        let cfg = RenderConfig::default();
        let (empty, grid, decoder, cam) = bench_scene(0);
        let one = bench_render(&empty, &grid, &decoder, std::slice::from_ref(&cam), &cfg, 1).unwrap();
        assert_eq!(one.frames, 1);
        assert_eq!(one.median_ms, one.min_ms);
        assert_eq!(one.median_ms, one.max_ms);
        let (full, ..) = bench_scene(4096);
        let fast = bench_render(&empty, &grid, &decoder, std::slice::from_ref(&cam), &cfg, 20).unwrap();
        let slow = bench_render(&full, &grid, &decoder, std::slice::from_ref(&cam), &cfg, 20).unwrap();
        assert!(fast.median_ms < slow.median_ms, "{} vs {}", fast.median_ms, slow.median_ms);
        assert!(slow.blends.mean > 0.0 && fast.blends.mean == 0.0);
    }

    #[test]
    fn chamfer_values() {
        let a = vec![Vector3::new(0.0, 0.0, 0.0)];
        let b = vec![Vector3::new(1.0, 0.0, 0.0)];
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer(&a, &b).unwrap(), 1.0);
        assert!(chamfer(&a, &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<Vector3<f64>> = (0..150).map(|_| Vector3::from_fn(|_, _| rng.random())).collect();
        let q: Vec<Vector3<f64>> = (0..90).map(|_| Vector3::from_fn(|_, _| rng.random())).collect();
        let mut ab = 0.0;
        for x in &p {
            let mut best = f64::MAX;
            for y in &q {
                best = best.min((x - y).norm());
            }
            ab += best;
        }
        let mut ba = 0.0;
        for y in &q {
            let mut best = f64::MAX;
            for x in &p {
                best = best.min((x - y).norm());
            }
            ba += best;
        }
        let expect = 0.5 * (ab / 150.0 + ba / 90.0);
        assert!((chamfer(&p, &q).unwrap() - expect).abs() < 1e-12);
        assert_eq!(chamfer(&p, &q).unwrap(), chamfer(&q, &p).unwrap());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0]), 3.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
