//! Optimization: phase schedule, Langevin position noise, relocation of dead
//! surfels, entropy-driven pruning and the training loop.

mod mcmc;
mod trainer;

use serde::{Deserialize, Serialize};

pub use mcmc::{
    langevin_noise, noise_gate, prune, relocate_dead, sample_donors, sgld_step, split_opacity, NoiseParams,
    SurfelOptimizers,
};
pub use trainer::{init_cloud, passthrough_decoder, train, LogRecord, Trainer};

use crate::field::{AdamParams, GridConfig};
use crate::geometry::KernelMode;
use crate::losses::LossWeights;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Direct RGB, Gaussian kernel, no decoder or hash grid.
    Warmup,
    /// Hybrid features with Langevin noise and relocation.
    Mcmc,
    /// Entropy penalty on opacities and pruning.
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub position: f64,
    /// Positions decay exponentially to this rate at the last iteration.
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub beta: f64,
    pub latent: f64,
    pub hash: f64,
    pub decoder: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            beta: 5e-3,
            latent: 2.5e-3,
            hash: 1e-2,
            decoder: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub warmup_iters: u64,
    pub bce_start_iter: u64,
    /// Without the entropy phase the Mcmc phase runs to the end.
    pub bce_enabled: bool,
    /// Fixed surfel budget.
    pub mcmc_cap: usize,
    pub relocation_period: u64,
    pub dead_threshold: f64,
    pub prune_threshold: f64,
    pub noise_lr: f64,
    pub tangent_fraction: f64,
    pub gate_k: f64,
    pub gate_opacity: f64,
    pub beta_init: f64,
    /// Learn the per-surfel kernel shape; off means Gaussian splats throughout.
    pub beta_enabled: bool,
    pub kernel: KernelMode,
    pub kappa: f64,
    pub scale_max: f64,
    pub latent_dim: usize,
    pub grid: GridConfig,
    pub decoder_hidden: Vec<usize>,
    pub loss: LossWeights,
    pub lr: LearningRates,
    pub adam: AdamParams,
    pub tile_size: u32,
    pub t_floor: f64,
    pub background: [f64; 3],
    pub seed: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::Full)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let full = TrainConfig {
            total_iters: 30_000,
            warmup_iters: 10_000,
            bce_start_iter: 24_000,
            bce_enabled: true,
            mcmc_cap: 500_000,
            relocation_period: 100,
            dead_threshold: 0.005,
            prune_threshold: 0.01,
            noise_lr: 5e-4,
            tangent_fraction: 0.95,
            gate_k: 100.0,
            gate_opacity: 0.05,
            beta_init: 10.0,
            beta_enabled: true,
            kernel: KernelMode::Beta,
            kappa: crate::geometry::DEFAULT_KAPPA,
            scale_max: 1.0,
            latent_dim: 4,
            grid: GridConfig::default(),
            decoder_hidden: vec![256],
            loss: LossWeights::default(),
            lr: LearningRates::default(),
            adam: AdamParams::default(),
            tile_size: 16,
            t_floor: 1e-4,
            background: [1.0; 3],
            seed: 0,
            log_every: 100,
        };
        match preset {
            Preset::Full => full,
            Preset::Desk => TrainConfig {
                total_iters: 2000,
                warmup_iters: 667,
                bce_start_iter: 1667,
                mcmc_cap: 256,
                scale_max: 0.5,
                grid: GridConfig {
                    levels: 1,
                    base_resolution: 64,
                    max_resolution: 64,
                    log2_table_size: 16,
                    feat_dim: 8,
                    init_range: 1e-4,
                },
                decoder_hidden: vec![32],
                // At 100 the distortion gradient takes over once the photometric
                // gradients flatten and the two_planes run falls apart mid-training.
                loss: LossWeights { lambda_dist: 10.0, ..LossWeights::default() },
                lr: LearningRates {
                    position: 2e-3,
                    position_final: 2e-5,
                    rotation: 5e-3,
                    scale: 1e-2,
                    opacity: 5e-2,
                    beta: 1e-2,
                    latent: 2e-2,
                    hash: 1e-2,
                    decoder: 3e-3,
                },
                log_every: 1,
                ..full
            },
        }
    }

    pub fn phase(&self, iter: u64) -> Phase {
        if iter < self.warmup_iters {
            Phase::Warmup
        } else if self.bce_enabled && iter >= self.bce_start_iter {
            Phase::Bce
        } else {
            Phase::Mcmc
        }
    }

    /// Sets the iteration budget and moves the phase boundaries with it.
    pub fn scale_iterations(&mut self, total: u64) {
        let old = self.total_iters.max(1) as f64;
        let f = total as f64 / old;
        self.warmup_iters = (self.warmup_iters as f64 * f).round() as u64;
        self.bce_start_iter = (self.bce_start_iter as f64 * f).round() as u64;
        self.total_iters = total;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_iters > 0 {
            if self.warmup_iters >= self.total_iters {
                return bad(format!("warmup_iters {} must be below total_iters {}", self.warmup_iters, self.total_iters));
            }
            if self.bce_enabled && !(self.warmup_iters < self.bce_start_iter && self.bce_start_iter < self.total_iters)
            {
                return bad(format!(
                    "need warmup_iters < bce_start_iter < total_iters, got {} / {} / {}",
                    self.warmup_iters, self.bce_start_iter, self.total_iters
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.tangent_fraction) {
            return bad(format!("tangent_fraction {} outside [0, 1]", self.tangent_fraction));
        }
        if self.kernel == KernelMode::Beta && !self.beta_enabled {
            return bad("kernel = beta requires beta_enabled".into());
        }
        if self.mcmc_cap == 0 {
            return bad("mcmc_cap must be at least 1".into());
        }
        if self.relocation_period == 0 {
            return bad("relocation_period must be at least 1".into());
        }
        if self.latent_dim < 3 {
            return bad("latent_dim must be at least 3 (warm-up colour slots)".into());
        }
        if self.decoder_hidden.iter().any(|&w| w < 6) {
            return bad("decoder hidden layers need at least 6 units".into());
        }
        if !(self.noise_lr >= 0.0 && self.scale_max > 0.0 && self.kappa > 0.0) {
            return bad("noise_lr must be >= 0, scale_max and kappa > 0".into());
        }
        if !(0.0..1.0).contains(&self.dead_threshold) || !(0.0..1.0).contains(&self.prune_threshold) {
            return bad("opacity thresholds must lie in [0, 1)".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        self.loss.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// Parses a full or partial configuration; missing keys keep their
    /// defaults from `base`, unknown keys are errors.
    pub fn overlay_json(base: &TrainConfig, json: &str) -> Result<TrainConfig> {
        let overlay: serde_json::Value =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("config overlay: {e}")))?;
        let mut merged = serde_json::to_value(base).expect("plain data");
        merge(&mut merged, overlay);
        serde_json::from_value(merged).map_err(|e| Error::Config(format!("config overlay: {e}")))
    }
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
