//! Fully connected network with tanh hidden layers and a linear scalar head.
//!
//! Parameters live in one flat vector, layer by layer, each layer stored as a
//! row-major `out × in` weight block followed by `out` biases.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `layers[0]` is the input, `layers[k]` the output of layer `k`.
    layers: Vec<Vec<f64>>,
}

impl Mlp {
    /// A zero-initialised network with the given layer widths, input first.
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output widths");
        let n = sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
        Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
        }
    }

    /// Orthogonal initialisation with `hidden_gain` on hidden layers and
    /// `output_gain` on the head; biases start at zero.
    pub fn orthogonal<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden_gain: f64,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut net = Self::zeros(sizes);
        let n_layers = sizes.len() - 1;
        let mut offset = 0;
        for k in 0..n_layers {
            let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
            let gain = if k + 1 == n_layers {
                output_gain
            } else {
                hidden_gain
            };
            let w = orthogonal_matrix(fan_out, fan_in, rng);
            for (dst, src) in net.params[offset..offset + fan_in * fan_out]
                .iter_mut()
                .zip(w)
            {
                *dst = gain * src;
            }
            offset += fan_out * (fan_in + 1);
        }
        net
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.sizes[0] {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "network expects {} inputs, got {}",
                self.sizes[0],
                x.len()
            )))
        }
    }

    /// Scalar output.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache)
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut ForwardCache) -> Result<f64> {
        self.check_input(x)?;
        let n_layers = self.sizes.len() - 1;
        cache.layers.resize(n_layers + 1, Vec::new());
        cache.layers[0].clear();
        cache.layers[0].extend_from_slice(x);
        let mut offset = 0;
        for k in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[k], self.sizes[k + 1]);
            let (w, rest) = self.params[offset..].split_at(fan_in * fan_out);
            let b = &rest[..fan_out];
            let (done, todo) = cache.layers.split_at_mut(k + 1);
            let input = &done[k];
            let out = &mut todo[0];
            out.clear();
            let last = k + 1 == n_layers;
            for (row, bias) in w.chunks_exact(fan_in).zip(b) {
                let z = bias + dot(row, input);
                out.push(if last { z } else { z.tanh() });
            }
            offset += fan_out * (fan_in + 1);
        }
        Ok(cache.layers[n_layers][0])
    }

    /// Adds `d_out · ∂output/∂params` into `grad`.
    pub fn backward(&self, cache: &ForwardCache, d_out: f64, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let n_layers = self.sizes.len() - 1;
        let mut delta = vec![d_out];
        let mut offset = self.params.len();
        for k in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[k], self.sizes[k + 1]);
            offset -= fan_out * (fan_in + 1);
            let input = &cache.layers[k];
            let (gw, gb) = grad[offset..offset + fan_out * (fan_in + 1)].split_at_mut(fan_in * fan_out);
            for (o, d) in delta.iter().enumerate() {
                gb[o] += d;
                for (g, x) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if k == 0 {
                break;
            }
            let w = &self.params[offset..offset + fan_in * fan_out];
            // back through the weights, then through tanh of layer k's input
            let mut prev = vec![0.0; fan_in];
            for (o, d) in delta.iter().enumerate() {
                for (p, wi) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *p += d * wi;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `rows × cols` row-major matrix with orthonormal rows (if `rows ≤ cols`)
/// or orthonormal columns (otherwise), via Gram–Schmidt on Gaussian samples.
fn orthogonal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (n_vec, dim) = if rows <= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n_vec);
    while basis.len() < n_vec {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &basis {
            let proj = dot(&v, u);
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= proj * ui;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut m = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            m[r * cols + c] = if rows <= cols {
                basis[r][c]
            } else {
                basis[c][r]
            };
        }
    }
    m
}
