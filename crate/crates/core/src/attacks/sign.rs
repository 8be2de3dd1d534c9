//! Signed-gradient attacks.

use crate::rng::{derive_seed, fill_uniform_symmetric, stream, Gaussian};
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::gradient::{eot_gradient, step_seed};
use super::{AdvBatch, AttackConfig, AttackTarget, Batch, Context};

/// `sign` with `sign(0) = 0`.
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-sample `Uniform(-eps, eps)` noise keyed by sample id.
fn uniform_noise(b: Batch<'_>, seed: u64, label: &str, eps: f32) -> Tensor<f32> {
    let mut out = Tensor::zeros(b.x.shape());
    for (i, &id) in b.ids.iter().enumerate() {
        fill_uniform_symmetric(&mut stream(derive_seed(seed, label, id)), eps, out.sample_mut(i));
    }
    out
}

fn grad_at<M: AttackTarget + ?Sized>(target: &M, x: &Tensor<f32>, b: Batch<'_>, cfg: &AttackConfig, t: u64) -> Result<Tensor<f32>> {
    eot_gradient(target, x, b.labels, b.ids, step_seed(cfg.seed, "step", t), cfg.eot_l)
}

/// `clip(x + step * sign(g))`.
fn signed_step(x: &Tensor<f32>, g: &Tensor<f32>, step: f32, cfg: &AttackConfig) -> Tensor<f32> {
    x.zip_map(g, |xv, gv| cfg.clip_value(xv + step * sign(gv)))
        .expect("gradient shaped like input")
}

/// `clip(x + clamp(x_cur - x + step * sign(g), -eps, eps))`.
fn projected_step(x: &Tensor<f32>, x_cur: &Tensor<f32>, g: &Tensor<f32>, step: f32, cfg: &AttackConfig) -> Tensor<f32> {
    let eps = cfg.eps;
    let data = x
        .data()
        .iter()
        .zip(x_cur.data())
        .zip(g.data())
        .map(|((&xv, &cv), &gv)| cfg.clip_value(xv + (cv - xv + step * sign(gv)).clamp(-eps, eps)))
        .collect();
    Tensor::new(x.shape(), data).expect("same length")
}

fn clip_all(t: &Tensor<f32>, cfg: &AttackConfig) -> Tensor<f32> {
    t.map(|v| cfg.clip_value(v))
}

pub fn fgsm<M: AttackTarget + ?Sized>(target: &M, b: Batch<'_>, cfg: &AttackConfig) -> Result<AdvBatch> {
    let g = grad_at(target, b.x, b, cfg, 0)?;
    let x_adv = signed_step(b.x, &g, cfg.eps, cfg);
    AdvBatch::finish(target, b, x_adv, cfg)
}

/// Random step `alpha_r * sign(N(0, 1))`, then an FGSM step of `eps - alpha_r`.
pub fn r_plus_fgsm<M: AttackTarget + ?Sized>(target: &M, b: Batch<'_>, cfg: &AttackConfig) -> Result<AdvBatch> {
    let ar = cfg.alpha();
    if ar > 0.0 && ar >= cfg.eps {
        return Err(Error::Attack(format!("random step {ar} must be smaller than eps {}", cfg.eps)));
    }
    let mut x0 = b.x.clone();
    if ar > 0.0 {
        for (i, &id) in b.ids.iter().enumerate() {
            let mut g = Gaussian::new(derive_seed(cfg.seed, "r+fgsm", id));
            for v in x0.sample_mut(i) {
                *v = cfg.clip_value(*v + ar * sign(g.next() as f32));
            }
        }
    }
    let g = grad_at(target, &x0, b, cfg, 0)?;
    let x_adv = signed_step(&x0, &g, cfg.eps - ar, cfg);
    AdvBatch::finish(target, b, x_adv, cfg)
}

/// Uniform start in the ball, an oversized step, then projection back.
pub fn rfgsm<M: AttackTarget + ?Sized>(target: &M, b: Batch<'_>, cfg: &AttackConfig) -> Result<AdvBatch> {
    let start = uniform_noise(b, cfg.seed, "rfgsm-start", cfg.eps);
    let x0 = clip_all(&b.x.zip_map(&start, |x, n| x + n)?, cfg);
    let g = grad_at(target, &x0, b, cfg, 0)?;
    let x_adv = projected_step(b.x, &x0, &g, cfg.alpha(), cfg);
    AdvBatch::finish(target, b, x_adv, cfg)
}

/// Uniform noise then a full `eps` signed step from the noisy point, without
/// projecting back to the `eps`-ball (offsets reach `2 eps`). Training only.
pub fn nfgsm<M: AttackTarget + ?Sized>(target: &M, b: Batch<'_>, cfg: &AttackConfig, ctx: Context) -> Result<AdvBatch> {
    if ctx == Context::Eval {
        return Err(Error::Attack(
            "nfgsm perturbations exceed the eps budget and cannot be used for evaluation".into(),
        ));
    }
    let noise = uniform_noise(b, cfg.seed, "nfgsm-noise", cfg.eps);
    let x_bn = clip_all(&b.x.zip_map(&noise, |x, n| x + n)?, cfg);
    let g = grad_at(target, &x_bn, b, cfg, 0)?;
    let x_adv = signed_step(&x_bn, &g, cfg.alpha(), cfg);
    AdvBatch::finish(target, b, x_adv, cfg)
}

/// Projected signed-gradient ascent. Step `t` draws its noise from the same
/// stream as FGSM when `t = 0`, so one unit step without a random start
/// reproduces FGSM.
pub fn pgd<M: AttackTarget + ?Sized>(target: &M, b: Batch<'_>, cfg: &AttackConfig) -> Result<AdvBatch> {
    let mut x_adv = if cfg.random_start {
        let start = uniform_noise(b, cfg.seed, "pgd-start", cfg.eps);
        clip_all(&b.x.zip_map(&start, |x, n| x + n)?, cfg)
    } else {
        b.x.clone()
    };
    let alpha = cfg.alpha();
    for t in 0..cfg.steps {
        let g = grad_at(target, &x_adv, b, cfg, t as u64)?;
        x_adv = projected_step(b.x, &x_adv, &g, alpha, cfg);
    }
    AdvBatch::finish(target, b, x_adv, cfg)
}
