use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::Result;

use super::AttackTarget;

/// Seed for step `t` of an attack stream.
pub fn step_seed(seed: u64, label: &str, t: u64) -> u64 {
    derive_seed(seed, label, t)
}

/// Noise seed of Monte Carlo draw `l` under `key`.
pub fn draw_seed(key: u64, l: usize) -> u64 {
    derive_seed(key, "eot", l as u64)
}

/// Mean input gradient of the summed loss over `l` noise draws. Draw `i`
/// uses noise seed [`draw_seed`]`(key, i)`; gradients are summed in draw
/// order and divided by `l`. A deterministic target is differentiated once.
pub fn eot_gradient<M: AttackTarget + ?Sized>(
    target: &M,
    x: &Tensor<f32>,
    labels: &[usize],
    ids: &[u64],
    key: u64,
    l: usize,
) -> Result<Tensor<f32>> {
    let draws = if target.is_stochastic() { l.max(1) } else { 1 };
    let mut acc = target.loss_and_grad(x, labels, ids, draw_seed(key, 0))?.1;
    for i in 1..draws {
        let g = target.loss_and_grad(x, labels, ids, draw_seed(key, i))?.1;
        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
            *a += v;
        }
    }
    if draws > 1 {
        let inv = draws as f32;
        for a in acc.data_mut() {
            *a /= inv;
        }
    }
    Ok(acc)
}
