//! Untargeted l-infinity attacks and the expectation-over-transformation
//! gradient.
//!
//! Every random quantity is keyed by the attack seed and the sample id, never
//! by batch position, and input gradients come from the summed (not mean)
//! loss. A sample's adversarial example therefore does not depend on how the
//! batch is chunked or which worker handles it.

mod gradient;
mod sign;
mod spsa;

pub use gradient::{eot_gradient, step_seed};
pub use sign::{fgsm, nfgsm, pgd, r_plus_fgsm, rfgsm};
pub use spsa::{spsa, spsa_gradient_estimate};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::models::{per_sample_cross_entropy, Model, Noise};
use crate::tensor::{one_hot, Reduction, Tape, Tensor};
use crate::{Error, Result};

/// Samples per parallel work item.
pub const ATTACK_CHUNK: usize = 25;

/// Something that can be attacked: per-sample losses, input gradients and
/// predictions under a keyed noise draw. Deterministic targets ignore the key.
pub trait AttackTarget: Sync {
    fn is_stochastic(&self) -> bool;

    /// Per-sample losses and the gradient of their sum with respect to `x`.
    fn loss_and_grad(&self, x: &Tensor<f32>, labels: &[usize], ids: &[u64], noise_seed: u64) -> Result<(Vec<f32>, Tensor<f32>)>;

    fn losses(&self, x: &Tensor<f32>, labels: &[usize], ids: &[u64], noise_seed: u64) -> Result<Vec<f32>>;

    fn predict(&self, x: &Tensor<f32>, ids: &[u64], noise_seed: u64) -> Result<Vec<usize>>;
}

impl AttackTarget for Model<f32> {
    fn is_stochastic(&self) -> bool {
        self.has_pnil()
    }

    fn loss_and_grad(&self, x: &Tensor<f32>, labels: &[usize], ids: &[u64], noise_seed: u64) -> Result<(Vec<f32>, Tensor<f32>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), true);
        let logits = self.forward(&mut tape, &p, xv, Noise::PerSample { seed: noise_seed, ids })?;
        let losses = per_sample_cross_entropy(tape.value(logits), labels);
        let y = one_hot(labels, self.num_classes);
        let loss = tape.softmax_cross_entropy(logits, &y, Reduction::Sum)?;
        let mut g = tape.backward(loss)?;
        let grad = g.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((losses, grad))
    }

    fn losses(&self, x: &Tensor<f32>, labels: &[usize], ids: &[u64], noise_seed: u64) -> Result<Vec<f32>> {
        let z = self.logits(x, Noise::PerSample { seed: noise_seed, ids })?;
        Ok(per_sample_cross_entropy(&z, labels))
    }

    fn predict(&self, x: &Tensor<f32>, ids: &[u64], noise_seed: u64) -> Result<Vec<usize>> {
        Ok(Model::predict(self, x, Noise::PerSample { seed: noise_seed, ids })?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    RPlusFgsm,
    Rfgsm,
    Nfgsm,
    Pgd,
    Spsa,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::RPlusFgsm => "r_plus_fgsm",
            AttackKind::Rfgsm => "rfgsm",
            AttackKind::Nfgsm => "nfgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Spsa => "spsa",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "fgsm" => AttackKind::Fgsm,
            "r_plus_fgsm" | "r+fgsm" | "rplusfgsm" => AttackKind::RPlusFgsm,
            "rfgsm" => AttackKind::Rfgsm,
            "nfgsm" => AttackKind::Nfgsm,
            "pgd" => AttackKind::Pgd,
            "spsa" => AttackKind::Spsa,
            _ => return Err(Error::Config(format!("unknown attack {s:?}"))),
        })
    }
}

/// Whether an attack runs inside training or to measure robustness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Context {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub eps: f32,
    /// Step size. `None` picks the kind's default: `2 eps / steps` for PGD,
    /// `1.2 eps` for RFGSM, the random-step size `eps / 2` for R+FGSM and
    /// `eps` otherwise.
    pub alpha: Option<f32>,
    pub steps: usize,
    /// Monte Carlo draws per gradient.
    pub eot_l: usize,
    pub random_start: bool,
    pub spsa_samples: usize,
    pub spsa_delta: f32,
    pub spsa_lr: f32,
    /// Valid input interval; `None` disables clipping.
    pub clip: Option<(f32, f32)>,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, eps: f32) -> Self {
        let steps = match kind {
            AttackKind::Pgd => 50,
            AttackKind::Spsa => 100,
            _ => 1,
        };
        Self {
            kind,
            eps,
            alpha: None,
            steps,
            eot_l: 1,
            random_start: true,
            spsa_samples: 2048,
            spsa_delta: 0.01,
            spsa_lr: 0.01,
            clip: Some((0.0, 1.0)),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn alpha(&self) -> f32 {
        self.alpha.unwrap_or(match self.kind {
            AttackKind::Pgd => 2.0 * self.eps / self.steps as f32,
            AttackKind::Rfgsm => 1.2 * self.eps,
            AttackKind::RPlusFgsm => self.eps / 2.0,
            _ => self.eps,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be finite and >= 0, got {}", self.eps));
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.eot_l == 0 {
            return bad("eot_l must be >= 1".into());
        }
        if let Some((lo, hi)) = self.clip {
            if lo >= hi {
                return bad(format!("clip range ({lo}, {hi}) is empty"));
            }
        }
        if self.kind == AttackKind::Spsa && (self.spsa_samples == 0 || self.spsa_delta <= 0.0) {
            return bad("spsa needs samples >= 1 and delta > 0".into());
        }
        if !(self.alpha() >= 0.0) {
            return bad(format!("step size must be >= 0, got {}", self.alpha()));
        }
        Ok(())
    }

    pub(crate) fn clip_value(&self, v: f32) -> f32 {
        match self.clip {
            Some((lo, hi)) => v.clamp(lo, hi),
            None => v,
        }
    }
}

/// Clean inputs with labels and stable sample ids.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a Tensor<f32>,
    pub labels: &'a [usize],
    pub ids: &'a [u64],
}

impl<'a> Batch<'a> {
    pub fn new(x: &'a Tensor<f32>, labels: &'a [usize], ids: &'a [u64]) -> Result<Self> {
        if x.batch() != labels.len() || labels.len() != ids.len() {
            return Err(Error::Attack(format!(
                "batch of {} inputs with {} labels and {} ids",
                x.batch(),
                labels.len(),
                ids.len()
            )));
        }
        Ok(Self { x, labels, ids })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvBatch {
    pub x_adv: Tensor<f32>,
    /// `x_adv - x`.
    pub delta: Tensor<f32>,
    /// Per-sample misclassification at `x_adv`.
    pub success: Vec<bool>,
}

impl AdvBatch {
    pub(crate) fn finish<M: AttackTarget + ?Sized>(target: &M, b: Batch<'_>, x_adv: Tensor<f32>, cfg: &AttackConfig) -> Result<Self> {
        let delta = x_adv.zip_map(b.x, |a, x| a - x)?;
        let pred = target.predict(&x_adv, b.ids, step_seed(cfg.seed, "predict", 0))?;
        let success = pred.iter().zip(b.labels).map(|(p, l)| p != l).collect();
        Ok(Self { x_adv, delta, success })
    }

    /// Largest per-sample l-infinity norm of `delta`.
    pub fn max_linf(&self) -> f32 {
        self.delta.max_abs()
    }

    fn concat(parts: Vec<AdvBatch>) -> Result<Self> {
        let xs: Vec<_> = parts.iter().map(|p| p.x_adv.clone()).collect();
        let ds: Vec<_> = parts.iter().map(|p| p.delta.clone()).collect();
        Ok(Self {
            x_adv: Tensor::concat_batch(&xs)?,
            delta: Tensor::concat_batch(&ds)?,
            success: parts.into_iter().flat_map(|p| p.success).collect(),
        })
    }
}

fn attack_chunk<M: AttackTarget + ?Sized>(target: &M, b: Batch<'_>, cfg: &AttackConfig, ctx: Context) -> Result<AdvBatch> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(target, b, cfg),
        AttackKind::RPlusFgsm => r_plus_fgsm(target, b, cfg),
        AttackKind::Rfgsm => rfgsm(target, b, cfg),
        AttackKind::Nfgsm => nfgsm(target, b, cfg, ctx),
        AttackKind::Pgd => pgd(target, b, cfg),
        AttackKind::Spsa => spsa(target, b, cfg),
    }
}

/// Runs the configured attack, splitting the batch into chunks that are
/// processed in parallel on the current rayon pool and joined in order.
pub fn run_attack<M: AttackTarget + ?Sized>(target: &M, b: Batch<'_>, cfg: &AttackConfig, ctx: Context) -> Result<AdvBatch> {
    cfg.validate()?;
    let n = b.labels.len();
    if n <= ATTACK_CHUNK {
        return attack_chunk(target, b, cfg, ctx);
    }
    let starts: Vec<usize> = (0..n).step_by(ATTACK_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let e = (s + ATTACK_CHUNK).min(n);
            let x = b.x.slice_batch(s..e);
            attack_chunk(target, Batch::new(&x, &b.labels[s..e], &b.ids[s..e])?, cfg, ctx)
        })
        .collect::<Result<Vec<_>>>()?;
    AdvBatch::concat(parts)
}
