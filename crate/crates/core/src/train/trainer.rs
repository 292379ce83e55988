use std::path::PathBuf;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mcmc::{prune, relocate_dead, sgld_step, NoiseParams, SurfelOptimizers};
use super::{Phase, TrainConfig};
use crate::dataio::{save_checkpoint, Checkpoint, Dataset, RngState};
use crate::field::{Adam, Decoder, HashGrid, SH_DIM};
use crate::geometry::{logit, KernelMode, SurfelCloud, SCALE_MIN};
use crate::losses::{total_loss, LossReport};
use crate::metrics::psnr;
use crate::renderer::{blend_stats, render, render_backward, ColorMode, FeatureMask, FrameBundle, RenderConfig};
use crate::{Camera, Error, Result};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub phase: Phase,
    pub losses: LossReport,
    pub psnr: f64,
    pub n_surfels: usize,
    pub mean_blends: f64,
}

/// Complete optimization state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub cloud: SurfelCloud,
    pub grid: HashGrid,
    pub decoder: Decoder,
    pub surfel_opt: SurfelOptimizers,
    pub table_opt: Adam,
    pub decoder_opt: Adam,
    /// Next iteration to run.
    pub iter: u64,
    rng: ChaCha8Rng,
    /// Where a diagnostic checkpoint goes if the loss turns non-finite.
    pub diagnostics_dir: Option<PathBuf>,
}

/// RMS distance to the three nearest neighbours of each point.
fn knn_scales(points: &[Vector3<f64>]) -> Vec<f64> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let mut best = [f64::INFINITY; 3];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d2 = (points[i] - points[j]).norm_squared();
                if d2 < best[2] {
                    best[2] = d2;
                    best.sort_by(f64::total_cmp);
                }
            }
            let found: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
            if found.is_empty() {
                0.1
            } else {
                (found.iter().sum::<f64>() / found.len() as f64).sqrt()
            }
        })
        .collect()
}

fn random_rotation(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let n = q.norm();
        if n > 1e-6 {
            return [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        }
    }
}

/// Initial surfels: seeded from the dataset points when present, otherwise
/// uniform in the scene box. Opacity 0.5, random orientation, kernel shape
/// `beta_init`; the first three latent slots hold colour logits.
pub fn init_cloud(cfg: &TrainConfig, ds: &Dataset, rng: &mut impl Rng) -> SurfelCloud {
    let n = cfg.mcmc_cap;
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    match ds.points.as_deref() {
        Some(points) if !points.is_empty() => {
            if points.len() >= n {
                let mut idx = rand::seq::index::sample(rng, points.len(), n).into_vec();
                idx.sort_unstable();
                for i in idx {
                    positions.push(Vector3::from(points[i].position));
                    colors.push(points[i].color);
                }
            } else {
                let extent = (ds.aabb_max - ds.aabb_min).norm() * 1e-3;
                for k in 0..n {
                    let p = &points[k % points.len()];
                    let jitter = if k < points.len() {
                        Vector3::zeros()
                    } else {
                        Vector3::from_fn(|_, _| rng.random_range(-extent..extent))
                    };
                    positions.push(Vector3::from(p.position) + jitter);
                    colors.push(p.color);
                }
            }
        }
        _ => {
            for _ in 0..n {
                positions.push(Vector3::from_fn(|a, _| rng.random_range(ds.aabb_min[a]..ds.aabb_max[a])));
                colors.push([0.5; 3]);
            }
        }
    }
    let scales = if n <= 20_000 {
        knn_scales(&positions)
    } else {
        let vol: f64 = (0..3).map(|a| ds.aabb_max[a] - ds.aabb_min[a]).product();
        vec![0.5 * (vol / n as f64).cbrt(); n]
    };
    let mut cloud = SurfelCloud::new(cfg.latent_dim);
    for i in 0..n {
        let s = scales[i].clamp(SCALE_MIN, cfg.scale_max);
        let mut latent = vec![0.0; cfg.latent_dim];
        for c in 0..3 {
            latent[c] = logit(colors[i][c].clamp(0.02, 0.98));
        }
        cloud.push(&crate::Surfel {
            position: positions[i],
            rotation: random_rotation(rng),
            scale: [s, s],
            opacity_logit: 0.0,
            beta: cfg.beta_init,
            latent,
        });
    }
    cloud
}

/// Sets the first hidden units of `decoder` so that, at initialization, its
/// output is `sigmoid(x[0..3])`: each layer carries `relu(x) - relu(-x)` per
/// channel. Every other weight keeps its random value except the output
/// weights from the remaining hidden units, which start at zero.
pub fn passthrough_decoder(decoder: &mut Decoder) {
    let widths = decoder.widths().to_vec();
    let mut offset = 0;
    let layers = widths.len() - 1;
    for l in 0..layers {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let (w, rest) = decoder.params[offset..].split_at_mut(fan_in * fan_out);
        let b = &mut rest[..fan_out];
        if l + 1 < layers {
            for j in 0..6 {
                w[j * fan_in..(j + 1) * fan_in].fill(0.0);
                b[j] = 0.0;
                if l == 0 {
                    let c = j / 2;
                    w[j * fan_in + c] = if j % 2 == 0 { 1.0 } else { -1.0 };
                } else {
                    w[j * fan_in + j] = 1.0;
                }
            }
        } else {
            for c in 0..3 {
                w[c * fan_in..(c + 1) * fan_in].fill(0.0);
                b[c] = 0.0;
                if layers == 1 {
                    w[c * fan_in + c] = 1.0;
                } else {
                    w[c * fan_in + 2 * c] = 1.0;
                    w[c * fan_in + 2 * c + 1] = -1.0;
                }
            }
        }
        offset += fan_in * fan_out + fan_out;
    }
}

const SURFEL_GROUPS: [&str; 6] = ["positions", "rotations", "log_scales", "opacity_logits", "betas", "latents"];

impl Trainer {
    pub fn new(cfg: TrainConfig, ds: &Dataset) -> Result<Self> {
        cfg.validate()?;
        ds.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let cloud = init_cloud(&cfg, ds, &mut rng);
        let grid = HashGrid::new(&cfg.grid, ds.aabb_min, ds.aabb_max, &mut rng)?;
        let mut widths = vec![cfg.latent_dim + grid.output_dim() + SH_DIM];
        widths.extend_from_slice(&cfg.decoder_hidden);
        widths.push(3);
        let mut decoder = Decoder::new(&widths, &mut rng)?;
        passthrough_decoder(&mut decoder);
        let lr = &cfg.lr;
        let surfel_opt = SurfelOptimizers::new(
            &cloud,
            [lr.position, lr.rotation, lr.scale, lr.opacity, lr.beta, lr.latent],
            cfg.adam,
        );
        let table_opt = Adam::new(grid.table.len(), lr.hash, cfg.adam);
        let decoder_opt = Adam::new(decoder.params.len(), lr.decoder, cfg.adam);
        Ok(Trainer { cfg, cloud, grid, decoder, surfel_opt, table_opt, decoder_opt, iter: 0, rng, diagnostics_dir: None })
    }

    pub fn phase(&self) -> Phase {
        self.cfg.phase(self.iter)
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.cfg.total_iters
    }

    /// Renderer settings for `phase`.
    pub fn render_config(&self, phase: Phase, save_for_backward: bool) -> RenderConfig {
        let warm = phase == Phase::Warmup;
        RenderConfig {
            tile_size: self.cfg.tile_size,
            t_floor: self.cfg.t_floor,
            kappa: self.cfg.kappa,
            kernel: if warm { KernelMode::Gaussian } else { self.cfg.kernel },
            background: self.cfg.background,
            color_mode: if warm { ColorMode::Direct } else { ColorMode::Neural },
            mask: FeatureMask::Full,
            save_for_backward,
        }
    }

    /// Settings matching the most recently completed iteration.
    pub fn eval_config(&self) -> RenderConfig {
        self.render_config(self.cfg.phase(self.iter.saturating_sub(1)), false)
    }

    pub fn render(&self, camera: &Camera) -> FrameBundle {
        render(&self.cloud, &self.grid, &self.decoder, camera, &self.eval_config())
    }

    fn position_lr(&self) -> f64 {
        let lr = &self.cfg.lr;
        if lr.position == 0.0 {
            return 0.0;
        }
        let f = self.iter as f64 / self.cfg.total_iters.max(1) as f64;
        lr.position * (lr.position_final / lr.position).powf(f)
    }

    /// Runs one iteration and returns its log record.
    pub fn step(&mut self, ds: &Dataset) -> Result<LogRecord> {
        let iter = self.iter;
        let phase = self.cfg.phase(iter);
        if iter == self.cfg.warmup_iters && iter > 0 {
            // colour logits become the base latent; restart their moments
            self.surfel_opt.latents = Adam::new(self.surfel_opt.latents.len(), self.cfg.lr.latent, self.cfg.adam);
        }
        let view = &ds.train[self.rng.random_range(0..ds.train.len())];
        let rcfg = self.render_config(phase, true);
        let bundle = render(&self.cloud, &self.grid, &self.decoder, &view.camera, &rcfg);
        let loss = total_loss(&bundle, &view.image, &self.cloud.opacity_logits, &self.cfg.loss, phase)?;
        if !loss.report.total.is_finite() {
            let checkpoint = match &self.diagnostics_dir {
                Some(dir) => {
                    let path = dir.join(format!("diverged_{iter:06}.ckpt"));
                    save_checkpoint(&self.checkpoint(), &path)?;
                    Some(path)
                }
                None => None,
            };
            return Err(Error::NonFiniteLoss { iter, checkpoint });
        }
        let mut g = render_backward(&bundle, &self.cloud, &self.grid, &self.decoder, &loss.frame);
        for (a, b) in g.opacity_logits.iter_mut().zip(&loss.opacity_logits) {
            *a += b;
        }

        self.surfel_opt.positions.lr = self.position_lr();
        let noise = NoiseParams {
            noise_lr: self.cfg.noise_lr,
            tangent_fraction: self.cfg.tangent_fraction,
            gate_k: self.cfg.gate_k,
            gate_opacity: self.cfg.gate_opacity,
        };
        sgld_step(&mut self.cloud, &mut self.surfel_opt.positions, &g.positions, &noise, phase, &mut self.rng);
        let opt = &mut self.surfel_opt;
        opt.rotations.step(&mut self.cloud.rotations, &g.rotations);
        opt.log_scales.step(&mut self.cloud.log_scales, &g.log_scales);
        opt.opacity_logits.step(&mut self.cloud.opacity_logits, &g.opacity_logits);
        opt.latents.step(&mut self.cloud.latents, &g.latents);
        if phase != Phase::Warmup {
            if self.cfg.kernel == KernelMode::Beta {
                opt.betas.step(&mut self.cloud.betas, &g.betas);
            }
            self.table_opt.step(&mut self.grid.table, &g.table);
            self.decoder_opt.step(&mut self.decoder.params, &g.decoder);
        }
        self.cloud.sanitize(self.cfg.scale_max);

        let boundary = (iter + 1) % self.cfg.relocation_period == 0;
        if phase == Phase::Mcmc && boundary {
            relocate_dead(&mut self.cloud, &mut self.surfel_opt, self.cfg.dead_threshold, self.cfg.beta_init, &mut self.rng);
        }
        if phase == Phase::Bce && (boundary || iter + 1 == self.cfg.total_iters) {
            prune(&mut self.cloud, &mut self.surfel_opt, self.cfg.prune_threshold);
        }
        self.iter += 1;
        Ok(LogRecord {
            iter,
            phase,
            losses: loss.report,
            psnr: psnr(&bundle.rgb, &view.image)?,
            n_surfels: self.cloud.len(),
            mean_blends: blend_stats(&bundle).mean,
        })
    }

    /// Trains to `total_iters`, passing every `log_every`-th record (and the
    /// last) to `on_log`.
    pub fn run(&mut self, ds: &Dataset, mut on_log: impl FnMut(&LogRecord)) -> Result<()> {
        while !self.is_done() {
            let rec = self.step(ds)?;
            if rec.iter % self.cfg.log_every == 0 || self.is_done() {
                on_log(&rec);
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut optimizers: Vec<(String, Adam)> =
            self.surfel_opt.named().iter().map(|(n, a)| (n.to_string(), (*a).clone())).collect();
        optimizers.push(("table".into(), self.table_opt.clone()));
        optimizers.push(("decoder".into(), self.decoder_opt.clone()));
        Checkpoint {
            iter: self.iter,
            config_json: self.cfg.to_json(),
            cloud: self.cloud.clone(),
            grid: self.grid.clone(),
            decoder: self.decoder.clone(),
            optimizers,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::Checkpoint(format!("stored configuration: {e}")))?;
        let find = |name: &str| {
            ck.optimizers
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| a.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {name}")))
        };
        let parts: [Adam; 6] = [
            find(SURFEL_GROUPS[0])?,
            find(SURFEL_GROUPS[1])?,
            find(SURFEL_GROUPS[2])?,
            find(SURFEL_GROUPS[3])?,
            find(SURFEL_GROUPS[4])?,
            find(SURFEL_GROUPS[5])?,
        ];
        let surfel_opt = SurfelOptimizers::from_parts(&ck.cloud, parts)
            .ok_or_else(|| Error::Checkpoint("optimizer state does not match the cloud".into()))?;
        let table_opt = find("table")?;
        let decoder_opt = find("decoder")?;
        if table_opt.len() != ck.grid.table.len() || decoder_opt.len() != ck.decoder.params.len() {
            return Err(Error::Checkpoint("optimizer state does not match grid or decoder".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(ck.rng.seed);
        rng.set_stream(ck.rng.stream);
        rng.set_word_pos(ck.rng.word_pos);
        Ok(Trainer {
            cfg,
            cloud: ck.cloud.clone(),
            grid: ck.grid.clone(),
            decoder: ck.decoder.clone(),
            surfel_opt,
            table_opt,
            decoder_opt,
            iter: ck.iter,
            rng,
            diagnostics_dir: None,
        })
    }
}

/// Trains from scratch; returns the final state and the emitted log.
pub fn train(ds: &Dataset, cfg: TrainConfig) -> Result<(Trainer, Vec<LogRecord>)> {
    let mut trainer = Trainer::new(cfg, ds)?;
    let mut log = Vec::new();
    trainer.run(ds, |r| log.push(r.clone()))?;
    Ok((trainer, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_toy_scene, ToySpec};
    use crate::field::{sh_encode, Activations};
    use crate::train::Preset;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            total_iters: 12,
            warmup_iters: 4,
            bce_start_iter: 9,
            mcmc_cap: 24,
            relocation_period: 3,
            ..TrainConfig::preset(Preset::Desk)
        }
    }

    fn tiny_scene() -> Dataset {
        let spec = ToySpec { width: 20, height: 20, focal: 22.0, ..ToySpec::default() };
        gen_toy_scene(&spec).unwrap().0
    }

    #[test]
    fn passthrough_decoder_outputs_sigmoid_of_first_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for hidden in [vec![8], vec![16, 12]] {
            let mut widths = vec![4 + 3 + SH_DIM];
            widths.extend(hidden);
            widths.push(3);
            let mut d = Decoder::new(&widths, &mut rng).unwrap();
            passthrough_decoder(&mut d);
            let mut x: Vec<f64> = vec![1.2, -0.7, 0.1, 0.4, 0.3, -0.2, 0.9];
            x.extend_from_slice(&sh_encode(&Vector3::new(0.3, -0.5, 0.8).normalize()));
            let y = d.forward(&x, &mut Activations::default());
            for c in 0..3 {
                assert!((y[c] - 1.0 / (1.0 + (-x[c]).exp())).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let ds = tiny_scene();
        let cfg = TrainConfig { total_iters: 0, ..tiny_cfg() };
        let (t, log) = train(&ds, cfg).unwrap();
        assert!(log.is_empty());
        assert_eq!(t.iter, 0);
        assert_eq!(t.cloud.len(), 24);
        assert!(t.cloud.opacities().iter().all(|&o| o == 0.5));
    }

    #[test]
    fn initial_latents_hold_colour_logits() {
        let ds = tiny_scene();
        let t = Trainer::new(tiny_cfg(), &ds).unwrap();
        for i in 0..t.cloud.len() {
            let l = t.cloud.latent(i);
            assert_eq!(l[3], 0.0);
            assert!(l[..3].iter().all(|v| v.abs() < 4.0));
        }
    }

    #[test]
    fn short_run_is_deterministic_and_resumable() {
        let ds = tiny_scene();
        let (a, log_a) = train(&ds, tiny_cfg()).unwrap();
        let (b, log_b) = train(&ds, tiny_cfg()).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
        assert_eq!(log_a.len(), 12);
        let phases: Vec<Phase> = log_a.iter().map(|r| r.phase).collect();
        assert_eq!(phases[3], Phase::Warmup);
        assert_eq!(phases[4], Phase::Mcmc);
        assert_eq!(phases[9], Phase::Bce);

        let mut c = Trainer::new(tiny_cfg(), &ds).unwrap();
        for _ in 0..7 {
            c.step(&ds).unwrap();
        }
        let ck = Checkpoint::from_bytes(&c.checkpoint().to_bytes()).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ck).unwrap();
        let mut tail = Vec::new();
        resumed.run(&ds, |r| tail.push(r.clone())).unwrap();
        assert_eq!(tail, log_a[7..].to_vec());
        assert_eq!(resumed.checkpoint().to_bytes(), a.checkpoint().to_bytes());
    }

    #[test]
    fn count_never_exceeds_cap() {
        let ds = tiny_scene();
        let (_, log) = train(&ds, tiny_cfg()).unwrap();
        for w in log.windows(2) {
            assert!(w[1].n_surfels <= 24);
            if w[1].phase != Phase::Bce {
                assert_eq!(w[1].n_surfels, 24);
            } else {
                assert!(w[1].n_surfels <= w[0].n_surfels);
            }
        }
    }

    #[test]
    fn warmup_reduces_loss_on_single_red_surfel() {
        use crate::dataio::{SeedPoint, View};
        let cam = Camera::look_at(
            12,
            12,
            14.0,
            14.0,
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
        );
        let mut image = vec![1.0; 3 * 144];
        for p in 0..144 {
            let (x, y) = (p % 12, p / 12);
            if (3..9).contains(&x) && (3..9).contains(&y) {
                image[3 * p..3 * p + 3].copy_from_slice(&[0.9, 0.1, 0.1]);
            }
        }
        let ds = Dataset {
            train: vec![View { name: "red".into(), camera: cam, image }],
            test: vec![],
            points: Some(vec![SeedPoint { position: [0.0; 3], color: [0.5; 3] }]),
            aabb_min: Vector3::from([-1.5; 3]),
            aabb_max: Vector3::from([1.5; 3]),
        };
        let cfg = TrainConfig {
            total_iters: 60,
            warmup_iters: 50,
            bce_start_iter: 55,
            mcmc_cap: 1,
            scale_max: 1.0,
            loss: crate::losses::LossWeights { lambda_dist: 0.0, lambda_normal: 0.0, ..Default::default() },
            ..TrainConfig::preset(Preset::Desk)
        };
        let mut t = Trainer::new(cfg, &ds).unwrap();
        t.cloud.rotations[..4].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        t.cloud.log_scales.fill((0.15f64).ln());
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let r = t.step(&ds).unwrap();
            assert_eq!(r.phase, Phase::Warmup);
            assert!(r.losses.total < prev, "loss rose to {} from {prev}", r.losses.total);
            prev = r.losses.total;
        }
    }

    #[test]
    fn zero_learning_rate_leaves_cloud_unchanged_in_warmup() {
        let ds = tiny_scene();
        let lr = crate::train::LearningRates {
            position: 0.0,
            position_final: 0.0,
            rotation: 0.0,
            scale: 0.0,
            opacity: 0.0,
            beta: 0.0,
            latent: 0.0,
            hash: 0.0,
            decoder: 0.0,
        };
        let mut t = Trainer::new(TrainConfig { lr, ..tiny_cfg() }, &ds).unwrap();
        let before = t.cloud.clone();
        for _ in 0..3 {
            t.step(&ds).unwrap();
        }
        assert_eq!(t.cloud, before);
    }
}
