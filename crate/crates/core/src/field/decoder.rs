use rand::Rng;

use crate::geometry::sigmoid;
use crate::{Error, Result};

/// Fully connected network: rectified hidden layers, sigmoid RGB output.
///
/// Parameters live in one flat vector; layer `l` stores its weight matrix
/// (`out x in`, row-major) followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    widths: Vec<usize>,
    pub params: Vec<f64>,
}

/// Per-sample activations saved by [`Decoder::forward`] for the reverse pass.
#[derive(Clone, Debug, Default)]
pub struct Activations {
    /// `layers[0]` is the input; `layers[l]` the output of layer `l - 1`.
    layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.layers.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Decoder {
    /// Zero-initialized decoder; `widths = [in, hidden.., 3]`.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || *widths.last().unwrap() != 3 {
            return Err(Error::Config(format!("decoder widths {widths:?} must end in 3")));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("decoder widths {widths:?} contain a zero")));
        }
        let count = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Decoder {
            widths: widths.to_vec(),
            params: vec![0.0; count],
        })
    }

    /// Weights and biases uniform in `+-1/sqrt(fan_in)`.
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut d = Self::zeros(widths)?;
        let mut off = 0;
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let n = w[0] * w[1] + w[1];
            for p in &mut d.params[off..off + n] {
                *p = rng.random_range(-bound..bound);
            }
            off += n;
        }
        Ok(d)
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut d = Self::zeros(widths)?;
        if params.len() != d.params.len() {
            return Err(Error::Shape(format!(
                "decoder expects {} parameters, got {}",
                d.params.len(),
                params.len()
            )));
        }
        d.params = params;
        Ok(d)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // (weight offset, fan in, fan out)
        self.widths.windows(2).scan(0usize, |off, w| {
            let here = *off;
            *off += w[0] * w[1] + w[1];
            Some((here, w[0], w[1]))
        })
    }

    pub fn forward(&self, input: &[f64], acts: &mut Activations) -> [f64; 3] {
        assert_eq!(input.len(), self.input_dim(), "decoder input width");
        let n_layers = self.widths.len() - 1;
        acts.layers.resize_with(n_layers + 1, Vec::new);
        acts.layers[0].clear();
        acts.layers[0].extend_from_slice(input);
        for (l, (off, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let (prev, rest) = acts.layers.split_at_mut(l + 1);
            let x = &prev[l];
            let out = &mut rest[0];
            out.clear();
            let weights = &self.params[off..off + fan_in * fan_out];
            let bias = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let last = l + 1 == n_layers;
            for (row, &b) in weights.chunks_exact(fan_in).zip(bias) {
                let z = b + dot(row, x);
                out.push(if last { sigmoid(z) } else { z.max(0.0) });
            }
        }
        let y = acts.output();
        [y[0], y[1], y[2]]
    }

    /// Reverse pass for one sample: accumulates into `grad_params` and writes
    /// the input gradient into `grad_input`.
    pub fn backward(&self, acts: &Activations, grad_out: &[f64; 3], grad_params: &mut [f64], grad_input: &mut [f64]) {
        assert_eq!(grad_params.len(), self.params.len(), "decoder gradient buffer");
        assert_eq!(grad_input.len(), self.input_dim(), "decoder input gradient");
        let n_layers = self.widths.len() - 1;
        assert_eq!(acts.layers.len(), n_layers + 1, "activations were not saved");

        let y = acts.output();
        let mut g: Vec<f64> = (0..3).map(|c| grad_out[c] * y[c] * (1.0 - y[c])).collect();
        let offsets: Vec<_> = self.layer_offsets().collect();
        let mut ga = Vec::new();
        for l in (0..n_layers).rev() {
            let (off, fan_in, fan_out) = offsets[l];
            let x = &acts.layers[l];
            let nw = fan_in * fan_out;
            let weights = &self.params[off..off + nw];
            let (gw, gb) = grad_params[off..off + nw + fan_out].split_at_mut(nw);
            ga.clear();
            ga.resize(fan_in, 0.0);
            for o in 0..fan_out {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                gb[o] += go;
                axpy(go, x, &mut gw[o * fan_in..(o + 1) * fan_in]);
                axpy(go, &weights[o * fan_in..(o + 1) * fan_in], &mut ga);
            }
            if l == 0 {
                grad_input.copy_from_slice(&ga);
            } else {
                g.clear();
                g.extend(ga.iter().zip(x).map(|(&d, &a)| if a > 0.0 { d } else { 0.0 }));
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the loop vectorizes
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * i + k] * b[4 * i + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
