//! Optimizers, the cyclical schedule, the learning-rate range test and the
//! adversarial training loop.

mod optim;
mod schedule;
mod train;

pub use optim::{Adam, AdamConfig, Optimizer, Sgd};
pub use schedule::{cyclical_lr, lr_sweep, LrCurve};
pub use train::{adversarial_train, batch_gradients, select_best, validate, CheckpointRecord, TrainConfig, TrainOutcome, TRAIN_CHUNK};

use crate::attacks::{run_attack, AttackConfig, Batch, Context};
use crate::data::{seeded_permutation, Dataset};
use crate::models::Model;
use crate::rng::derive_seed;
use crate::tensor::TensorError;
use crate::{Error, Result};

/// Learning-rate range test on a copy of `model`: Adam updates on batches
/// drawn in a seeded order (adversarial when `attack` is set) while the rate
/// rises linearly across `span`.
pub fn lr_range_test(
    model: &Model<f32>,
    data: &Dataset,
    span: (f64, f64),
    iters: usize,
    batch_size: usize,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<LrCurve> {
    let mut m = model.clone();
    let mut adam = Adam::new(AdamConfig::default());
    let mut order = Vec::new();
    lr_sweep(span, iters, |i, lr| {
        if order.len() < batch_size {
            order.extend(seeded_permutation(data.len(), derive_seed(seed, "lr-find", i as u64)));
        }
        let idx: Vec<usize> = order.drain(..batch_size.min(order.len())).collect();
        let x = data.images.gather_batch(&idx);
        let labels: Vec<usize> = idx.iter().map(|&j| data.labels[j]).collect();
        let ids: Vec<u64> = idx.iter().map(|&j| j as u64).collect();
        let x = match attack {
            Some(a) => {
                let a = a.clone().with_seed(derive_seed(seed, "lr-find-attack", i as u64));
                run_attack(&m, Batch::new(&x, &labels, &ids)?, &a, Context::Train)?.x_adv
            }
            None => x,
        };
        let (loss, grads) = match batch_gradients(&m, &x, &labels, &ids, derive_seed(seed, "lr-find-noise", i as u64)) {
            Ok(v) => v,
            Err(Error::Tensor(TensorError::NonFinite { .. })) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        };
        let mut params: Vec<&mut [f32]> = m.params.values_mut().map(|t| t.data_mut()).collect();
        let g: Vec<&[f32]> = grads.iter().map(|t| t.data()).collect();
        adam.step(&mut params, &g, lr as f32);
        Ok(loss)
    })
}
