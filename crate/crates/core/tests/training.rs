use proptest::prelude::*;
use rand::Rng;

use robustkit::attacks::{AttackConfig, AttackKind};
use robustkit::data::Dataset;
use robustkit::eval::accuracy;
use robustkit::models::{build_small_cnn, load_checkpoint, Model, PnilInit, SmallCnnConfig};
use robustkit::rng::stream;
use robustkit::tensor::Tensor;
use robustkit::training::{adversarial_train, cyclical_lr, lr_range_test, select_best, Adam, AdamConfig, CheckpointRecord, Optimizer, TrainConfig};
use robustkit::Error;

/// Two classes of 1x6x6 images: a bright left half or a bright right half,
/// plus uniform noise.
fn halves(n: usize, seed: u64) -> Dataset {
    let mut rng = stream(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut data = Vec::with_capacity(n * 36);
    for &l in &labels {
        for _ in 0..6 {
            for c in 0..6 {
                let on = (c < 3) == (l == 0);
                data.push(if on { 0.7 } else { 0.2 } + 0.2 * rng.random::<f32>());
            }
        }
    }
    Dataset::new("halves", "train", Tensor::new([n, 1, 6, 6], data).unwrap(), labels, 2).unwrap()
}

fn model(pnil: bool) -> Model<f32> {
    let cfg = SmallCnnConfig {
        channels: (4, 4),
        pnil: pnil.then(PnilInit::default),
        ..SmallCnnConfig::default()
    };
    build_small_cnn([1, 6, 6], 2, &cfg, 11).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::nfgsm(0.05);
    cfg.epochs = epochs;
    cfg.batch_size = 20;
    cfg.lr_lo = 1e-3;
    cfg.lr_hi = 1e-2;
    cfg.val_attack.steps = 3;
    cfg
}

fn ids(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}

#[test]
fn nfgsm_training_learns_a_separable_task() {
    let (train, val) = (halves(200, 1), halves(100, 2));
    let mut m = model(true);
    let before = accuracy(&m, &val.images, &val.labels, &ids(100), 0).unwrap();
    let out = adversarial_train(&mut m, &train, &val, &config(6), None).unwrap();
    let after = accuracy(&m, &val.images, &val.labels, &ids(100), 0).unwrap();
    assert!(after >= 95.0, "accuracy {before} -> {after}");
    assert_eq!(out.iterations, 6 * 10);
    let first = out.records[0].adv_val_loss;
    assert!(out.records[out.best.unwrap()].adv_val_loss < first);
}

#[test]
fn clean_and_rfgsm_training_run() {
    let (train, val) = (halves(100, 3), halves(40, 4));
    for attack in [None, Some(AttackConfig::new(AttackKind::Rfgsm, 0.05))] {
        let mut cfg = config(3);
        cfg.attack = attack;
        let mut m = model(false);
        adversarial_train(&mut m, &train, &val, &cfg, None).unwrap();
        assert!(accuracy(&m, &val.images, &val.labels, &ids(40), 0).unwrap() > 80.0);
    }
}

#[test]
fn pgd_is_not_a_training_attack() {
    let (train, val) = (halves(20, 3), halves(20, 4));
    let mut cfg = config(1);
    cfg.attack = Some(AttackConfig::new(AttackKind::Pgd, 0.05));
    assert!(matches!(adversarial_train(&mut model(false), &train, &val, &cfg, None), Err(Error::Config(_))));
}

#[test]
fn zero_epochs_leave_the_model_untouched() {
    let (train, val) = (halves(20, 3), halves(20, 4));
    let mut m = model(true);
    let init = m.clone();
    let out = adversarial_train(&mut m, &train, &val, &config(0), None).unwrap();
    assert_eq!(m.params, init.params);
    assert!(out.records.is_empty() && out.best.is_none());
}

#[test]
fn training_is_reproducible() {
    let (train, val) = (halves(60, 5), halves(20, 6));
    let run = || {
        let mut m = model(true);
        adversarial_train(&mut m, &train, &val, &config(2), None).unwrap();
        m.params
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoints_log_and_best_restore() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = (halves(100, 7), halves(40, 8));
    let mut m = model(true);
    let out = adversarial_train(&mut m, &train, &val, &config(4), Some(dir.path())).unwrap();
    assert_eq!(out.records.len(), 4);
    for (e, r) in out.records.iter().enumerate() {
        assert_eq!(r.path.as_deref(), Some(dir.path().join(format!("epoch_{e:03}.afck")).as_path()));
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,clean_val_acc,adv_val_loss,lr");
    assert_eq!(lines.len(), 5);
    let best = &out.records[out.best.unwrap()];
    let ckpt = load_checkpoint(best.path.as_ref().unwrap()).unwrap();
    let mut restored = model(true);
    restored.load_params(&ckpt).unwrap();
    assert_eq!(restored.params, m.params);
}

#[test]
fn early_stopping_after_patience() {
    let (train, val) = (halves(40, 9), halves(20, 10));
    let mut cfg = config(30);
    cfg.patience = 1;
    cfg.lr_lo = 1e-9;
    cfg.lr_hi = 2e-9;
    let out = adversarial_train(&mut model(false), &train, &val, &cfg, None).unwrap();
    assert!(out.stopped_early);
    assert!(out.records.len() < 30);
}

#[test]
fn divergence_reports_epoch_and_batch() {
    let (train, val) = (halves(40, 9), halves(20, 10));
    let mut cfg = config(5);
    cfg.attack = None;
    cfg.lr_lo = 1e30;
    cfg.lr_hi = 1e31;
    match adversarial_train(&mut model(false), &train, &val, &cfg, None) {
        Err(e @ Error::NonFiniteLoss { .. }) => assert!(e.is_numeric()),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn lr_range_test_finds_a_minimum_before_divergence() {
    let data = halves(200, 12);
    let curve = lr_range_test(&model(false), &data, (1e-5, 10.0), 60, 20, None, 0).unwrap();
    let (lo, hi) = curve.suggest_bounds().unwrap();
    assert!(lo < hi && hi < 10.0);
    assert!((hi / lo - 10.0).abs() < 1e-9);
}

#[test]
fn best_record_ties_keep_the_earliest() {
    let rec = |epoch, loss| CheckpointRecord {
        epoch,
        adv_val_loss: loss,
        clean_val_acc: 0.0,
        lr: 0.0,
        path: None,
    };
    assert_eq!(select_best(&[rec(0, 0.5), rec(1, 0.3), rec(2, 0.3), rec(3, 0.4)]), Some(1));
    assert_eq!(select_best(&[]), None);
}

/// Adam against a direct f64 transcription of the update rule.
#[test]
fn adam_matches_reference() {
    let cfg = AdamConfig::default();
    let mut rng = stream(4);
    let mut p = vec![0.3f32, -1.2, 2.0];
    let (mut pr, mut m, mut v) = (p.iter().map(|&x| x as f64).collect::<Vec<_>>(), [0.0f64; 3], [0.0f64; 3]);
    let mut adam = Adam::new(cfg);
    for t in 1..=50 {
        let g: Vec<f32> = (0..3).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        let lr = 0.01;
        adam.step(&mut [p.as_mut_slice()], &[g.as_slice()], lr);
        for j in 0..3 {
            let gj = g[j] as f64;
            m[j] = 0.9 * m[j] + 0.1 * gj;
            v[j] = 0.999 * v[j] + 0.001 * gj * gj;
            let mh = m[j] / (1.0 - 0.9f64.powi(t));
            let vh = v[j] / (1.0 - 0.999f64.powi(t));
            pr[j] -= lr as f64 * mh / (vh.sqrt() + 1e-8);
        }
    }
    for (a, b) in p.iter().zip(&pr) {
        assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
    }
}

proptest! {
    #[test]
    fn cyclical_lr_is_a_bounded_periodic_triangle(lo in 1e-6f64..1e-3, span in 1.0f64..100.0, half in 1usize..50, it in 0usize..10_000) {
        let hi = lo * span;
        let len = 2 * half;
        let v = cyclical_lr(it, lo, hi, len);
        prop_assert!(v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12));
        prop_assert_eq!(v, cyclical_lr(it + len, lo, hi, len));
        let pos = it % len;
        let mirror = (len - pos) % len;
        prop_assert!((v - cyclical_lr(mirror, lo, hi, len)).abs() <= 1e-12 * hi);
        let want = lo + (hi - lo) * (half as f64 - (pos as f64 - half as f64).abs()) / half as f64;
        prop_assert!((v - want).abs() <= 1e-12 * hi);
    }
}
