//! Small dense-network toolkit: Adam over flat parameter slices and a ReLU
//! multilayer perceptron with hand-written backprop.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "parameter group count changed");
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Gaussian init with std `scale / sqrt(fan_in)`.
pub fn init_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let std = scale / (rows.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

pub struct MlpTrace {
    /// Input to each layer; the last entry is the network output.
    activations: Vec<Array2<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("trace has an output")
    }
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`; He-style init.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                w: init_matrix(rng, w[0], w[1], 2f64.sqrt()),
                b: Array1::zeros(w[1]),
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").w.ncols()
    }

    pub fn forward_trace(&self, x: Array2<f64>) -> MlpTrace {
        let mut activations = vec![x];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = activations[i].dot(&layer.w) + &layer.b;
            if i < last {
                y.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(y);
        }
        MlpTrace { activations }
    }

    pub fn forward(&self, x: Array2<f64>) -> Array2<f64> {
        self.forward_trace(x).activations.pop().expect("output")
    }

    /// Gradients for every layer given dLoss/dOutput, shaped like `self`.
    pub fn backward(&self, trace: &MlpTrace, d_out: Array2<f64>) -> Mlp {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = d_out;
        for i in (0..self.layers.len()).rev() {
            let input = &trace.activations[i];
            let dw = input.t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            grads.push(Dense { w: dw, b: db });
            if i > 0 {
                let mut d_in = delta.dot(&self.layers[i].w.t());
                // input to layer i is a ReLU output: zero where it was clamped
                d_in.zip_mut_with(input, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = d_in;
            }
        }
        grads.reverse();
        Mlp { layers: grads }
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| [l.w.len(), l.b.len()]).collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.w.as_slice_mut().expect("standard layout"),
                    l.b.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice().expect("standard layout"), l.b.as_slice().expect("standard layout")])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}
