//! Gradient-free attack driven by simultaneous-perturbation estimates.

use crate::rng::{derive_seed, fill_rademacher, stream, StreamRng};
use crate::tensor::Tensor;
use crate::Result;

use super::gradient::step_seed;
use super::{AdvBatch, AttackConfig, AttackTarget, Batch};

/// Directions evaluated per forward pass (each costs two rows).
const PROBE_CHUNK: usize = 128;

/// Estimates the gradient of `loss` at `x` from `samples` Rademacher
/// directions `v`: the mean of `(loss(x + dv) - loss(x - dv)) / 2d * v`.
/// `loss` receives a batch of probe points shaped `(rows, ..sample_shape)`
/// and returns one loss per row; `x` has a leading batch extent of 1.
pub fn spsa_gradient_estimate<F>(mut loss: F, x: &Tensor<f32>, samples: usize, delta: f32, rng: &mut StreamRng) -> Result<Vec<f32>>
where
    F: FnMut(&Tensor<f32>) -> Result<Vec<f32>>,
{
    let d = x.len();
    let mut shape = x.shape().to_vec();
    let mut g = vec![0f32; d];
    let mut done = 0;
    while done < samples {
        let k = PROBE_CHUNK.min(samples - done);
        let mut dirs = vec![0f32; k * d];
        fill_rademacher(rng, &mut dirs);
        let mut probes = Vec::with_capacity(2 * k * d);
        for v in dirs.chunks(d) {
            probes.extend(x.data().iter().zip(v).map(|(a, s)| a + delta * s));
            probes.extend(x.data().iter().zip(v).map(|(a, s)| a - delta * s));
        }
        shape[0] = 2 * k;
        let l = loss(&Tensor::new(shape.clone(), probes)?)?;
        for (j, v) in dirs.chunks(d).enumerate() {
            let c = (l[2 * j] - l[2 * j + 1]) / (2.0 * delta);
            for (gi, s) in g.iter_mut().zip(v) {
                *gi += c * s;
            }
        }
        done += k;
    }
    let n = samples as f32;
    for gi in &mut g {
        *gi /= n;
    }
    Ok(g)
}

/// Maximizes the loss with Adam on SPSA gradient estimates, projecting onto
/// the `eps`-ball and the valid range after every step. Each probe sees its
/// own noise draw on stochastic targets.
pub fn spsa<M: AttackTarget + ?Sized>(target: &M, b: Batch<'_>, cfg: &AttackConfig) -> Result<AdvBatch> {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const ADAM_EPS: f32 = 1e-8;
    let mut x_adv = b.x.clone();
    for (i, &id) in b.ids.iter().enumerate() {
        let mut shape = b.x.shape().to_vec();
        shape[0] = 1;
        let x = Tensor::new(shape.clone(), b.x.sample(i).to_vec())?;
        let d = x.len();
        let mut rng = stream(derive_seed(cfg.seed, "spsa-dirs", id));
        let noise_key = derive_seed(cfg.seed, "spsa-noise", id);
        let (mut m, mut v) = (vec![0f32; d], vec![0f32; d]);
        let mut cur = x.clone();
        for t in 0..cfg.steps {
            let seed = step_seed(noise_key, "step", t as u64);
            let label = b.labels[i];
            let loss = |probes: &Tensor<f32>| {
                let rows = probes.batch();
                let ids: Vec<u64> = (0..rows as u64).collect();
                target.losses(probes, &vec![label; rows], &ids, seed)
            };
            let g = spsa_gradient_estimate(loss, &cur, cfg.spsa_samples, cfg.spsa_delta, &mut rng)?;
            let tt = (t + 1) as i32;
            let (c1, c2) = (1.0 - B1.powi(tt), 1.0 - B2.powi(tt));
            for k in 0..d {
                m[k] = B1 * m[k] + (1.0 - B1) * g[k];
                v[k] = B2 * v[k] + (1.0 - B2) * g[k] * g[k];
                let step = cfg.spsa_lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                let xv = x.data()[k];
                let delta = (cur.data()[k] - xv + step).clamp(-cfg.eps, cfg.eps);
                cur.data_mut()[k] = cfg.clip_value(xv + delta);
            }
        }
        x_adv.sample_mut(i).copy_from_slice(cur.data());
    }
    AdvBatch::finish(target, b, x_adv, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_of_a_linear_loss_is_unbiased() {
        let w = [0.8f32, -0.6];
        let x = Tensor::new([1, 2], vec![0.3, 0.4]).unwrap();
        let lin = |p: &Tensor<f32>| {
            Ok((0..p.batch())
                .map(|r| p.sample(r).iter().zip(&w).map(|(a, b)| a * b).sum())
                .collect())
        };
        let mut rng = stream(11);
        let g = spsa_gradient_estimate(lin, &x, 2048 * 20, 0.01, &mut rng).unwrap();
        for (gi, wi) in g.iter().zip(&w) {
            assert!(((gi - wi) / wi).abs() < 0.02, "{gi} vs {wi}");
        }
    }
}
