//! Robustness evaluation, curves and the corrected resampled t-test.

mod report;
mod stats;

pub use report::{format_summary_table, AttackAccuracy, EvalReport, SummaryRow};
pub use stats::{corrected_resampled_ttest, student_t_two_sided, TTestResult, DEFAULT_ALPHA};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackConfig, AttackKind, AttackTarget, Batch, Context};
use crate::data::Dataset;
use crate::rng::{derive_seed, fnv1a};
use crate::tensor::Tensor;
use crate::{Error, Result};

const EVAL_CHUNK: usize = 100;

fn chunked<R: Send>(n: usize, f: impl Fn(usize, usize) -> Result<Vec<R>> + Sync) -> Result<Vec<R>> {
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| f(s, (s + EVAL_CHUNK).min(n)))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Percentage of correct predictions.
pub fn accuracy<M: AttackTarget + ?Sized>(model: &M, x: &Tensor<f32>, labels: &[usize], ids: &[u64], seed: u64) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Config("accuracy of an empty set".into()));
    }
    let pred = chunked(labels.len(), |s, e| model.predict(&x.slice_batch(s..e), &ids[s..e], seed))?;
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Mean per-sample cross-entropy.
pub fn mean_loss<M: AttackTarget + ?Sized>(model: &M, x: &Tensor<f32>, labels: &[usize], ids: &[u64], seed: u64) -> Result<f64> {
    let losses = chunked(labels.len(), |s, e| model.losses(&x.slice_batch(s..e), &labels[s..e], &ids[s..e], seed))?;
    Ok(losses.iter().map(|&l| l as f64).sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalAttack {
    Clean,
    Pgd,
    Spsa,
}

impl EvalAttack {
    pub fn name(self) -> &'static str {
        match self {
            EvalAttack::Clean => "clean",
            EvalAttack::Pgd => "pgd",
            EvalAttack::Spsa => "spsa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clean" => Ok(EvalAttack::Clean),
            "pgd" => Ok(EvalAttack::Pgd),
            "spsa" => Ok(EvalAttack::Spsa),
            other => Err(Error::Config(format!("unknown evaluation attack {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub eps: f32,
    pub attacks: Vec<EvalAttack>,
    /// Monte Carlo draws per gradient for stochastic models.
    pub eot_l: usize,
    pub pgd_steps: usize,
    pub pgd_random_start: bool,
    pub spsa_steps: usize,
    pub spsa_samples: usize,
    pub spsa_delta: f32,
    pub spsa_lr: f32,
    /// Size of the seeded random subset attacked with SPSA.
    pub spsa_subset: usize,
    pub seed: u64,
}

impl EvalConfig {
    pub fn new(eps: f32) -> Self {
        Self {
            eps,
            attacks: vec![EvalAttack::Clean, EvalAttack::Pgd, EvalAttack::Spsa],
            eot_l: 100,
            pgd_steps: 50,
            pgd_random_start: true,
            spsa_steps: 100,
            spsa_samples: 2048,
            spsa_delta: 0.01,
            spsa_lr: 0.01,
            spsa_subset: 1000,
            seed: 0,
        }
    }

    pub fn pgd(&self, eot_l: usize) -> AttackConfig {
        let mut c = AttackConfig::new(AttackKind::Pgd, self.eps).with_seed(derive_seed(self.seed, "pgd", 0));
        c.steps = self.pgd_steps;
        c.random_start = self.pgd_random_start;
        c.eot_l = eot_l;
        c
    }

    pub fn spsa(&self) -> AttackConfig {
        let mut c = AttackConfig::new(AttackKind::Spsa, self.eps).with_seed(derive_seed(self.seed, "spsa", 0));
        c.steps = self.spsa_steps;
        c.spsa_samples = self.spsa_samples;
        c.spsa_delta = self.spsa_delta;
        c.spsa_lr = self.spsa_lr;
        c
    }

    /// Hex FNV-1a digest of the serialized configuration.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a(&serde_json::to_string(self).expect("serializable")))
    }

    fn predict_seed(&self) -> u64 {
        derive_seed(self.seed, "predict", 0)
    }
}

/// Accuracy on `x_adv` (or the clean inputs) with the evaluation noise seed.
fn attacked_accuracy<M: AttackTarget + ?Sized>(model: &M, data: &Dataset, idx: Option<&[usize]>, cfg: &EvalConfig, attack: Option<&AttackConfig>) -> Result<f64> {
    let (x, labels, ids) = match idx {
        Some(idx) => (
            data.images.gather_batch(idx),
            idx.iter().map(|&i| data.labels[i]).collect::<Vec<_>>(),
            idx.iter().map(|&i| i as u64).collect::<Vec<_>>(),
        ),
        None => (data.images.clone(), data.labels.clone(), (0..data.len() as u64).collect()),
    };
    let x = match attack {
        Some(a) => run_attack(model, Batch::new(&x, &labels, &ids)?, a, Context::Eval)?.x_adv,
        None => x,
    };
    accuracy(model, &x, &labels, &ids, cfg.predict_seed())
}

/// Clean, PGD and SPSA accuracies and their minimum. PGD averages `eot_l`
/// gradients per step on stochastic models; SPSA runs on a seeded subset.
pub fn evaluate_robustness<M: AttackTarget + ?Sized>(model: &M, test: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.attacks.is_empty() {
        return Err(Error::Config("no attacks to evaluate".into()));
    }
    let start = std::time::Instant::now();
    let eot_l = if model.is_stochastic() { cfg.eot_l } else { 1 };
    let mut rows = Vec::new();
    let mut spsa_ids = Vec::new();
    for &a in &cfg.attacks {
        let (acc, samples) = match a {
            EvalAttack::Clean => (attacked_accuracy(model, test, None, cfg, None)?, test.len()),
            EvalAttack::Pgd => (attacked_accuracy(model, test, None, cfg, Some(&cfg.pgd(eot_l)))?, test.len()),
            EvalAttack::Spsa => {
                let (_, idx) = test.random_subset(cfg.spsa_subset, cfg.seed, "spsa-subset");
                let acc = attacked_accuracy(model, test, Some(&idx), cfg, Some(&cfg.spsa()))?;
                let n = idx.len();
                spsa_ids = idx;
                (acc, n)
            }
        };
        rows.push(AttackAccuracy {
            attack: a.name().to_string(),
            accuracy: acc,
            samples,
        });
    }
    Ok(EvalReport::new(rows, eot_l, spsa_ids, cfg.hash(), start.elapsed().as_secs_f64()))
}

/// PGD accuracy for each `eps` multiplier, with the step size rescaled so
/// that `steps * alpha = 2 eps'`.
pub fn perturbation_sweep<M: AttackTarget + ?Sized>(model: &M, data: &Dataset, cfg: &EvalConfig, multipliers: &[f32]) -> Result<Vec<(f32, f32, f64)>> {
    let eot_l = if model.is_stochastic() { cfg.eot_l } else { 1 };
    multipliers
        .iter()
        .map(|&m| {
            let mut a = cfg.pgd(eot_l);
            a.eps = cfg.eps * m;
            a.alpha = None;
            Ok((m, a.eps, attacked_accuracy(model, data, None, cfg, Some(&a))?))
        })
        .collect()
}

/// PGD accuracy for each Monte Carlo count.
pub fn eot_sensitivity<M: AttackTarget + ?Sized>(model: &M, data: &Dataset, cfg: &EvalConfig, l_values: &[usize]) -> Result<Vec<(usize, f64)>> {
    if !model.is_stochastic() {
        warn!("model has no noise layer; the curve is flat by construction");
    }
    l_values
        .iter()
        .map(|&l| Ok((l, attacked_accuracy(model, data, None, cfg, Some(&cfg.pgd(l)))?)))
        .collect()
}

/// Writes `(x, y)` rows under a two-column header.
pub fn write_curve_csv<X: ToString, Y: ToString>(path: &std::path::Path, header: [&str; 2], rows: impl IntoIterator<Item = (X, Y)>) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for (x, y) in rows {
        w.write_record([x.to_string(), y.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
