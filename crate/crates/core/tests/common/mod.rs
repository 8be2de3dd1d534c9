//! Oracle targets and small fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod stats;

use robustkit::attacks::AttackTarget;
use robustkit::models::{build_small_cnn, Layer, Mode, Model, ParamStore, PnilInit, SmallCnnConfig};
use robustkit::rng::{derive_seed, stream};
use robustkit::tensor::Tensor;
use robustkit::Result;

use rand::Rng;

/// Per-sample loss `w . x`; the input gradient is `w` everywhere.
pub struct Linear(pub Vec<f32>);

impl AttackTarget for Linear {
    fn is_stochastic(&self) -> bool {
        false
    }

    fn loss_and_grad(&self, x: &Tensor<f32>, labels: &[usize], ids: &[u64], s: u64) -> Result<(Vec<f32>, Tensor<f32>)> {
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.batch() {
            g.sample_mut(i).copy_from_slice(&self.0);
        }
        Ok((self.losses(x, labels, ids, s)?, g))
    }

    fn losses(&self, x: &Tensor<f32>, _: &[usize], _: &[u64], _: u64) -> Result<Vec<f32>> {
        Ok((0..x.batch())
            .map(|i| x.sample(i).iter().zip(&self.0).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn predict(&self, x: &Tensor<f32>, _: &[u64], _: u64) -> Result<Vec<usize>> {
        Ok(vec![0; x.batch()])
    }
}

/// Two-dimensional quadratic loss
/// `q(d) = 0.5 d^T A d + g^T d` with `d = x - c`.
pub struct Quadratic {
    pub a: [[f64; 2]; 2],
    pub g: [f64; 2],
    pub c: [f64; 2],
}

impl Quadratic {
    pub fn value(&self, x: [f64; 2]) -> f64 {
        let d = [x[0] - self.c[0], x[1] - self.c[1]];
        let ad = [self.a[0][0] * d[0] + self.a[0][1] * d[1], self.a[1][0] * d[0] + self.a[1][1] * d[1]];
        0.5 * (d[0] * ad[0] + d[1] * ad[1]) + self.g[0] * d[0] + self.g[1] * d[1]
    }

    fn grad(&self, x: [f64; 2]) -> [f64; 2] {
        let d = [x[0] - self.c[0], x[1] - self.c[1]];
        [
            self.a[0][0] * d[0] + self.a[0][1] * d[1] + self.g[0],
            self.a[1][0] * d[0] + self.a[1][1] * d[1] + self.g[1],
        ]
    }

    /// Largest value over a `(n + 1) x (n + 1)` grid on `[c - eps, c + eps]^2`.
    pub fn grid_max(&self, eps: f64, n: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for i in 0..=n {
            for j in 0..=n {
                let x = [
                    self.c[0] - eps + 2.0 * eps * i as f64 / n as f64,
                    self.c[1] - eps + 2.0 * eps * j as f64 / n as f64,
                ];
                best = best.max(self.value(x));
            }
        }
        best
    }
}

impl AttackTarget for Quadratic {
    fn is_stochastic(&self) -> bool {
        false
    }

    fn loss_and_grad(&self, x: &Tensor<f32>, labels: &[usize], ids: &[u64], s: u64) -> Result<(Vec<f32>, Tensor<f32>)> {
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.batch() {
            let p = x.sample(i);
            let gv = self.grad([p[0] as f64, p[1] as f64]);
            g.sample_mut(i).copy_from_slice(&[gv[0] as f32, gv[1] as f32]);
        }
        Ok((self.losses(x, labels, ids, s)?, g))
    }

    fn losses(&self, x: &Tensor<f32>, _: &[usize], _: &[u64], _: u64) -> Result<Vec<f32>> {
        Ok((0..x.batch())
            .map(|i| {
                let p = x.sample(i);
                self.value([p[0] as f64, p[1] as f64]) as f32
            })
            .collect())
    }

    fn predict(&self, x: &Tensor<f32>, _: &[u64], _: u64) -> Result<Vec<usize>> {
        Ok(vec![0; x.batch()])
    }
}

/// Flatten followed by one dense layer on `[1, 1, d]` inputs.
pub fn dense_model(weight: Vec<f32>, bias: Vec<f32>, d: usize) -> Model<f32> {
    let k = bias.len();
    let mut params = ParamStore::default();
    let w = params.insert("fc.weight", Tensor::new([d, k], weight).unwrap());
    let b = params.insert("fc.bias", Tensor::new([k], bias).unwrap());
    Model {
        arch: "dense".into(),
        layers: vec![Layer::Flatten, Layer::Dense { weight: w, bias: b }],
        params,
        input_shape: vec![1, 1, d],
        num_classes: k,
        mode: Mode::Eval,
        seed: 0,
    }
}

/// Small CNN on `1 x 8 x 8` inputs with a noise layer whose bias is raised
/// to `pnil_bias`.
pub fn tiny_cnn(seed: u64, pnil_bias: Option<f64>) -> Model<f32> {
    let cfg = SmallCnnConfig {
        channels: (3, 4),
        pnil: pnil_bias.map(|bias| PnilInit {
            bias,
            ..PnilInit::default()
        }),
        ..SmallCnnConfig::default()
    };
    build_small_cnn([1, 8, 8], 10, &cfg, seed).unwrap()
}

/// Uniform `[0, 1]` images with a few pixels pinned to the range ends.
pub fn random_images(n: usize, shape: [usize; 3], seed: u64) -> Tensor<f32> {
    let mut rng = stream(derive_seed(seed, "test-images", 0));
    Tensor::from_fn([n, shape[0], shape[1], shape[2]], |i| match i % 17 {
        0 => 0.0,
        1 => 1.0,
        _ => rng.random::<f32>(),
    })
}

pub fn random_labels(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream(derive_seed(seed, "test-labels", 0));
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

pub fn ids(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}
