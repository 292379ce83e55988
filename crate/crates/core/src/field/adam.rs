use serde::{Deserialize, Serialize};

/// Bias-corrected Adam over one flat parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

impl Adam {
    pub fn new(len: usize, lr: f64, hp: AdamParams) -> Self {
        Adam {
            lr,
            beta1: hp.beta1,
            beta2: hp.beta2,
            eps: hp.eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "adam parameter length");
        assert_eq!(grads.len(), self.m.len(), "adam gradient length");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = self.lr / bc1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step_size * *m / ((*v / bc2).sqrt() + eps);
        }
    }

    /// Zeroes the moments of parameter chunk `index` (chunks of `width`).
    pub fn reset_chunk(&mut self, width: usize, index: usize) {
        self.m[index * width..(index + 1) * width].fill(0.0);
        self.v[index * width..(index + 1) * width].fill(0.0);
    }

    /// Compacts the moments in lockstep with a parameter array.
    pub fn retain_mask(&mut self, width: usize, keep: &[bool]) {
        crate::geometry::retain_chunks(&mut self.m, width, keep);
        crate::geometry::retain_chunks(&mut self.v, width, keep);
    }

    pub fn copy_chunk(&mut self, width: usize, src: usize, dst: usize) {
        crate::geometry::copy_chunk(&mut self.m, width, src, dst);
        crate::geometry::copy_chunk(&mut self.v, width, src, dst);
    }
}
