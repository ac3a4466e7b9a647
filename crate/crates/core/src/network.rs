//! Dense feed-forward network shared by the predictor and the classifier.
//!
//! Hidden layers use the logistic sigmoid, the output layer is linear.
//! Weights are stored row-major (`out × in`) per layer. All loops run in a
//! fixed order so results are bit-reproducible.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShmError};
use crate::seeds::rng;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Gradient with the same layout as [`Network`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|g| *g *= s);
    }

    /// Flat view in the canonical parameter order (per layer: weights, then biases).
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }
}

/// Per-layer post-activation values from one forward pass; entry 0 is the input.
pub type Activations = Vec<Vec<f64>>;

impl Network {
    fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(ShmError::invalid(format!("invalid layer sizes {layer_sizes:?}")));
        }
        Ok(())
    }

    /// Glorot-uniform weights in `±√(6/(fan_in+fan_out))`, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        Self::check_sizes(layer_sizes)?;
        let mut r = rng(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| r.gen_range(-limit..limit)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self { layer_sizes: layer_sizes.to_vec(), weights, biases })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights: layer_sizes.windows(2).map(|p| vec![0.0; p[0] * p[1]]).collect(),
            biases: layer_sizes.windows(2).map(|p| vec![0.0; p[1]]).collect(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        Self::check_sizes(&self.layer_sizes)?;
        let n = self.layer_sizes.len() - 1;
        if self.weights.len() != n || self.biases.len() != n {
            return Err(ShmError::invalid("layer count does not match layer_sizes"));
        }
        for (l, p) in self.layer_sizes.windows(2).enumerate() {
            if self.weights[l].len() != p[0] * p[1] || self.biases[l].len() != p[1] {
                return Err(ShmError::invalid(format!("layer {l} has inconsistent shape")));
            }
        }
        if self.params().any(|v| !v.is_finite()) {
            return Err(ShmError::invalid("network has non-finite parameters"));
        }
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    pub fn forward_all(&self, input: &[f64]) -> Activations {
        let last = self.n_layers() - 1;
        let mut acts = Vec::with_capacity(self.n_layers() + 1);
        acts.push(input.to_vec());
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let x = &acts[l];
            let w = &self.weights[l];
            let out: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let z = self.biases[l][o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    if l == last {
                        z
                    } else {
                        sigmoid(z)
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_all(input).pop().expect("output layer")
    }

    /// Accumulate `∂L/∂θ` into `grads` given activations and `∂L/∂output`.
    pub fn backward(&self, acts: &Activations, d_output: &[f64], grads: &mut Gradients) {
        let mut delta = d_output.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let x = &acts[l];
            let gw = &mut grads.weights[l];
            for o in 0..n_out {
                grads.biases[l][o] += delta[o];
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += delta[o] * xi;
                }
            }
            if l > 0 {
                let w = &self.weights[l];
                delta = (0..n_in)
                    .map(|i| {
                        let back: f64 = (0..n_out).map(|o| w[o * n_in + i] * delta[o]).sum();
                        // hidden activations are sigmoids: σ' = σ(1 − σ)
                        back * x[i] * (1.0 - x[i])
                    })
                    .collect();
            }
        }
    }
}

/// Mini-batch SGD with classical momentum.
#[derive(Debug, Clone)]
pub struct Momentum {
    velocity: Gradients,
    pub lr: f64,
    pub momentum: f64,
}

impl Momentum {
    pub fn new(net: &Network, lr: f64, momentum: f64) -> Self {
        Self { velocity: Gradients::zeros_like(net), lr, momentum }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        for ((p, v), g) in net.params_mut().zip(self.velocity.iter_mut()).zip(grads.iter()) {
            *v = self.momentum * *v - self.lr * g;
            *p += *v;
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(net: &Network, lr: f64) -> Self {
        Self {
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, m), v), g) in net
            .params_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
            .zip(grads.iter())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}
