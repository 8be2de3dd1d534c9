use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackConfig, AttackKind, Batch, Context};
use crate::data::{seeded_permutation, Dataset};
use crate::eval::{accuracy, mean_loss};
use crate::models::{save_checkpoint, Checkpoint, Model, Noise};
use crate::rng::derive_seed;
use crate::tensor::{one_hot, Reduction, Tape, Tensor, TensorError};
use crate::{Error, Result};

use super::optim::{Adam, AdamConfig, Optimizer};
use super::schedule::cyclical_lr;

/// Samples per gradient work item. Chunk losses and gradients are summed in
/// chunk order, so results do not depend on the worker count.
pub const TRAIN_CHUNK: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Attack that generates the training inputs; `None` trains on clean data.
    pub attack: Option<AttackConfig>,
    pub adam: AdamConfig,
    pub lr_lo: f64,
    pub lr_hi: f64,
    /// Iterations per triangle; `None` uses four epochs.
    pub cycle_len: Option<usize>,
    /// Epochs without a lower adversarial validation loss before stopping.
    pub patience: usize,
    /// Attack used for the per-epoch adversarial validation loss.
    pub val_attack: AttackConfig,
    /// Restore the parameters of the best epoch when training ends.
    pub restore_best: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// NFGSM training at `eps`, validated with 10-step PGD.
    pub fn nfgsm(eps: f32) -> Self {
        let mut val_attack = AttackConfig::new(AttackKind::Pgd, eps);
        val_attack.steps = 10;
        Self {
            epochs: 30,
            batch_size: 100,
            attack: Some(AttackConfig::new(AttackKind::Nfgsm, eps)),
            adam: AdamConfig::default(),
            lr_lo: 1e-4,
            lr_hi: 1e-3,
            cycle_len: None,
            patience: 10,
            val_attack,
            restore_best: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_lo > 0.0 && self.lr_lo < self.lr_hi) {
            return Err(Error::Config(format!("need 0 < lr_lo < lr_hi, got {} and {}", self.lr_lo, self.lr_hi)));
        }
        if self.cycle_len.is_some_and(|c| c < 2) {
            return Err(Error::Config("cycle_len must be >= 2".into()));
        }
        if let Some(a) = &self.attack {
            if !matches!(a.kind, AttackKind::Nfgsm | AttackKind::Rfgsm | AttackKind::Fgsm) {
                return Err(Error::Config(format!("{} is not a training attack", a.kind)));
            }
            a.validate()?;
        }
        self.val_attack.validate()
    }
}

/// One epoch's validation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub adv_val_loss: f64,
    pub clean_val_acc: f64,
    pub lr: f64,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<CheckpointRecord>,
    /// Index into `records` of the lowest adversarial validation loss.
    pub best: Option<usize>,
    pub stopped_early: bool,
    pub iterations: usize,
}

/// Index of the smallest adversarial validation loss; ties keep the earliest.
pub fn select_best(records: &[CheckpointRecord]) -> Option<usize> {
    records
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.adv_val_loss.total_cmp(&b.1.adv_val_loss))
        .map(|(i, _)| i)
}

fn non_finite(e: Error, epoch: usize, batch: usize, lr: f64) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss { epoch, batch, lr },
        other => other,
    }
}

/// Mean cross-entropy over the batch and its parameter gradients.
pub fn batch_gradients(model: &Model<f32>, x: &Tensor<f32>, labels: &[usize], ids: &[u64], noise_seed: u64) -> Result<(f64, Vec<Tensor<f32>>)> {
    let n = labels.len();
    let starts: Vec<usize> = (0..n).step_by(TRAIN_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let e = (s + TRAIN_CHUNK).min(n);
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, true);
            let xv = tape.leaf(x.slice_batch(s..e), false);
            let logits = model.forward(&mut tape, &p, xv, Noise::PerSample { seed: noise_seed, ids: &ids[s..e] })?;
            let y = one_hot(&labels[s..e], model.num_classes);
            let loss = tape.softmax_cross_entropy(logits, &y, Reduction::Sum)?;
            let value = tape.value(loss).item();
            let mut g = tape.backward(loss)?;
            let grads = p
                .vars()
                .iter()
                .zip(model.params.iter())
                .map(|(&v, (_, t))| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect::<Vec<_>>();
            Ok::<_, Error>((value, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / n as f32;
    let mut iter = parts.into_iter();
    let (mut total, mut grads) = iter.next().ok_or_else(|| Error::Config("empty batch".into()))?;
    for (l, g) in iter {
        total += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            for (av, bv) in a.data_mut().iter_mut().zip(b.data()) {
                *av += bv;
            }
        }
    }
    for g in &mut grads {
        for v in g.data_mut() {
            *v *= inv;
        }
    }
    Ok((total as f64 * inv as f64, grads))
}

/// Sample ids are dataset indices.
fn ids_of(idx: &[usize]) -> Vec<u64> {
    idx.iter().map(|&i| i as u64).collect()
}

/// Clean accuracy and mean loss under the validation attack.
pub fn validate(model: &Model<f32>, val: &Dataset, attack: &AttackConfig, seed: u64) -> Result<(f64, f64)> {
    let ids: Vec<u64> = (0..val.len() as u64).collect();
    let clean = accuracy(model, &val.images, &val.labels, &ids, derive_seed(seed, "val-clean", 0))?;
    let b = Batch::new(&val.images, &val.labels, &ids)?;
    let adv = run_attack(model, b, &attack.clone().with_seed(derive_seed(seed, "val-attack", 0)), Context::Eval)?;
    let loss = mean_loss(model, &adv.x_adv, &val.labels, &ids, derive_seed(seed, "val-loss", 0))?;
    Ok((clean, loss))
}

/// Adversarial training with Adam under a cyclical learning rate. Each epoch
/// ends with an adversarial validation pass; when `out_dir` is given a
/// checkpoint and a CSV log row are written per epoch.
pub fn adversarial_train(model: &mut Model<f32>, train: &Dataset, val: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let cycle_len = cfg.cycle_len.unwrap_or(4 * per_epoch).max(2);
    let mut adam = Adam::new(cfg.adam);
    let mut records = Vec::new();
    let mut best_params = None;
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0;
    let mut iteration = 0;
    let mut stopped_early = false;
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
            w.write_record(["epoch", "clean_val_acc", "adv_val_loss", "lr"])
                .map_err(|e| Error::io(&path, e.into()))?;
            Some((w, path))
        }
        None => None,
    };

    for epoch in 0..cfg.epochs {
        let order = seeded_permutation(n, derive_seed(cfg.seed, "shuffle", epoch as u64));
        let mut lr = cfg.lr_lo;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            lr = cyclical_lr(iteration, cfg.lr_lo, cfg.lr_hi, cycle_len);
            let x = train.images.gather_batch(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let ids = ids_of(idx);
            let inputs = match &cfg.attack {
                Some(a) => {
                    let a = a.clone().with_seed(derive_seed(cfg.seed, "attack", iteration as u64));
                    run_attack(model, Batch::new(&x, &labels, &ids)?, &a, Context::Train)
                        .map_err(|e| non_finite(e, epoch, bi, lr))?
                        .x_adv
                }
                None => x,
            };
            let noise = derive_seed(cfg.seed, "pnil-train", iteration as u64);
            let (loss, grads) = batch_gradients(model, &inputs, &labels, &ids, noise).map_err(|e| non_finite(e, epoch, bi, lr))?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, lr });
            }
            let mut params: Vec<&mut [f32]> = model.params.values_mut().map(|t| t.data_mut()).collect();
            let g: Vec<&[f32]> = grads.iter().map(|t| t.data()).collect();
            adam.step(&mut params, &g, lr as f32);
            iteration += 1;
        }

        let (clean, adv_loss) = validate(model, val, &cfg.val_attack, derive_seed(cfg.seed, "val", epoch as u64))?;
        info!("epoch {epoch}: clean val acc {clean:.2}%, adv val loss {adv_loss:.4}, lr {lr:.2e}");
        let path = match out_dir {
            Some(dir) => {
                let p = dir.join(format!("epoch_{epoch:03}.afck"));
                let ckpt = Checkpoint::from_model(model)
                    .with_meta("epoch", epoch)
                    .with_meta("adv_val_loss", adv_loss)
                    .with_meta("clean_val_acc", clean);
                save_checkpoint(&p, &ckpt)?;
                Some(p)
            }
            None => None,
        };
        if let Some((w, p)) = &mut log {
            w.write_record([epoch.to_string(), clean.to_string(), adv_loss.to_string(), lr.to_string()])
                .and_then(|_| w.flush().map_err(Into::into))
                .map_err(|e| Error::io(p.as_path(), e.into()))?;
        }
        records.push(CheckpointRecord {
            epoch,
            adv_val_loss: adv_loss,
            clean_val_acc: clean,
            lr,
            path,
        });
        if adv_loss < best_loss {
            best_loss = adv_loss;
            since_best = 0;
            if cfg.restore_best {
                best_params = Some(model.params.clone());
            }
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    if let Some(p) = best_params {
        model.params = p;
    }
    Ok(TrainOutcome {
        best: select_best(&records),
        records,
        stopped_early,
        iterations: iteration,
    })
}
