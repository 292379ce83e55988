use nalgebra::Vector3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use super::Phase;
use crate::field::{Adam, AdamParams};
use crate::geometry::{logit, sigmoid, SurfelCloud};

/// Adam state for every per-surfel parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfelOptimizers {
    pub positions: Adam,
    pub rotations: Adam,
    pub log_scales: Adam,
    pub opacity_logits: Adam,
    pub betas: Adam,
    pub latents: Adam,
    latent_dim: usize,
}

impl SurfelOptimizers {
    pub fn new(cloud: &SurfelCloud, lrs: [f64; 6], hp: AdamParams) -> Self {
        let n = cloud.len();
        let d = cloud.latent_dim;
        SurfelOptimizers {
            positions: Adam::new(3 * n, lrs[0], hp),
            rotations: Adam::new(4 * n, lrs[1], hp),
            log_scales: Adam::new(2 * n, lrs[2], hp),
            opacity_logits: Adam::new(n, lrs[3], hp),
            betas: Adam::new(n, lrs[4], hp),
            latents: Adam::new(d * n, lrs[5], hp),
            latent_dim: d,
        }
    }

    /// Reassembles from stored states; `None` if the shapes disagree with `cloud`.
    pub fn from_parts(cloud: &SurfelCloud, parts: [Adam; 6]) -> Option<Self> {
        let [positions, rotations, log_scales, opacity_logits, betas, latents] = parts;
        let n = cloud.len();
        let d = cloud.latent_dim;
        let ok = positions.len() == 3 * n
            && rotations.len() == 4 * n
            && log_scales.len() == 2 * n
            && opacity_logits.len() == n
            && betas.len() == n
            && latents.len() == d * n;
        ok.then_some(SurfelOptimizers { positions, rotations, log_scales, opacity_logits, betas, latents, latent_dim: d })
    }

    fn groups(&mut self) -> [(&mut Adam, usize); 6] {
        [
            (&mut self.positions, 3),
            (&mut self.rotations, 4),
            (&mut self.log_scales, 2),
            (&mut self.opacity_logits, 1),
            (&mut self.betas, 1),
            (&mut self.latents, self.latent_dim),
        ]
    }

    pub fn named(&self) -> [(&'static str, &Adam); 6] {
        [
            ("positions", &self.positions),
            ("rotations", &self.rotations),
            ("log_scales", &self.log_scales),
            ("opacity_logits", &self.opacity_logits),
            ("betas", &self.betas),
            ("latents", &self.latents),
        ]
    }

    pub fn reset(&mut self, i: usize) {
        for (a, w) in self.groups() {
            a.reset_chunk(w, i);
        }
    }

    pub fn retain_mask(&mut self, keep: &[bool]) {
        for (a, w) in self.groups() {
            a.retain_mask(w, keep);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    pub noise_lr: f64,
    pub tangent_fraction: f64,
    pub gate_k: f64,
    pub gate_opacity: f64,
}

/// `sigmoid(-k (o - o0))`: close to 1 for transparent surfels, 0 for opaque ones.
pub fn noise_gate(opacity: f64, k: f64, o0: f64) -> f64 {
    sigmoid(-k * (opacity - o0))
}

/// Langevin displacement of surfel `i`, mostly in its tangent plane and
/// proportional to its extent.
pub fn langevin_noise(cloud: &SurfelCloud, i: usize, p: &NoiseParams, rng: &mut impl Rng) -> Vector3<f64> {
    let xi: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let frame = crate::geometry::splat_frame(&cloud.rotation(i));
    let su = cloud.log_scales[2 * i].exp();
    let sv = cloud.log_scales[2 * i + 1].exp();
    let rho = p.tangent_fraction;
    let eps = (frame.tangent_u * (xi[0] * su) + frame.tangent_v * (xi[1] * sv)) * rho
        + frame.normal * ((1.0 - rho) * xi[2] * su.min(sv));
    eps * ((2.0 * p.noise_lr).sqrt() * noise_gate(cloud.opacity(i), p.gate_k, p.gate_opacity))
}

/// Adam update of the positions followed by Langevin noise in the Mcmc phase.
pub fn sgld_step(
    cloud: &mut SurfelCloud,
    adam: &mut Adam,
    grads: &[f64],
    noise: &NoiseParams,
    phase: Phase,
    rng: &mut impl Rng,
) {
    adam.step(&mut cloud.positions, grads);
    if phase != Phase::Mcmc || noise.noise_lr == 0.0 {
        return;
    }
    for i in 0..cloud.len() {
        let d = langevin_noise(cloud, i, noise, rng);
        let p = cloud.position(i) + d;
        cloud.set_position(i, &p);
    }
}

/// `n` donor indices drawn independently with probability proportional to
/// opacity among `live`.
pub fn sample_donors(opacities: &[f64], live: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let weights: Vec<f64> = live.iter().map(|&i| opacities[i]).collect();
    let dist = WeightedIndex::new(&weights).expect("live set has positive opacities");
    (0..n).map(|_| live[dist.sample(rng)]).collect()
}

/// Opacity logit shared by a donor (logit `l`) and its `clones` copies so
/// that their stacked transmittance equals the donor's:
/// `(1 - o_new)^(clones + 1) = 1 - o`.
pub fn split_opacity(l: f64, clones: usize) -> f64 {
    // 1 - sigmoid(l) == sigmoid(-l) without cancellation
    let keep = sigmoid(-l);
    let q = if clones == 1 { keep.sqrt() } else { keep.powf(1.0 / (clones + 1) as f64) };
    logit(1.0 - q)
}

/// Moves every surfel below `dead_threshold` onto a donor sampled in
/// proportion to opacity, splitting the donor's opacity. Returns the number
/// of relocated surfels.
pub fn relocate_dead(
    cloud: &mut SurfelCloud,
    opt: &mut SurfelOptimizers,
    dead_threshold: f64,
    beta_init: f64,
    rng: &mut impl Rng,
) -> usize {
    let opacities = cloud.opacities();
    let (dead, live): (Vec<usize>, Vec<usize>) = (0..cloud.len()).partition(|&i| opacities[i] < dead_threshold);
    if dead.is_empty() {
        return 0;
    }
    if live.is_empty() {
        log::warn!("relocation skipped: no live surfels");
        return 0;
    }
    let donors = sample_donors(&opacities, &live, dead.len(), rng);
    let mut clones = vec![0usize; cloud.len()];
    for (&d, &src) in dead.iter().zip(&donors) {
        cloud.copy_surfel(src, d);
        clones[src] += 1;
    }
    let mut new_logit = vec![0.0; cloud.len()];
    for &src in &live {
        if clones[src] > 0 {
            new_logit[src] = split_opacity(cloud.opacity_logits[src], clones[src]);
        }
    }
    for (&d, &src) in dead.iter().zip(&donors) {
        new_logit[d] = new_logit[src];
    }
    for i in dead.iter().chain(live.iter().filter(|&&i| clones[i] > 0)) {
        cloud.opacity_logits[*i] = new_logit[*i];
        cloud.betas[*i] = beta_init;
        opt.reset(*i);
    }
    dead.len()
}

/// Removes surfels below `threshold`, compacting optimizer state in lockstep.
pub fn prune(cloud: &mut SurfelCloud, opt: &mut SurfelOptimizers, threshold: f64) -> usize {
    let keep: Vec<bool> = cloud.opacities().iter().map(|&o| o >= threshold).collect();
    let removed = keep.iter().filter(|k| !**k).count();
    if removed > 0 {
        cloud.retain_mask(&keep);
        opt.retain_mask(&keep);
    }
    removed
}
