use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::manifest::RunManifest;
use crate::attacks::{run_attack, AttackConfig, AttackKind, AttackTarget, Batch, Context};
use crate::data::{load_named, make_cv_plan, seeded_permutation, Dataset};
use crate::eval::{
    corrected_resampled_ttest, evaluate_robustness, eot_sensitivity, format_summary_table, perturbation_sweep, write_curve_csv, EvalReport,
    SummaryRow, TTestResult, DEFAULT_ALPHA,
};
use crate::gradcheck::{check_case, random_suite};
use crate::models::{load_checkpoint, save_checkpoint, Checkpoint, Model};
use crate::rng::{derive_seed, fnv1a};
use crate::tensor::Tensor;
use crate::training::{adversarial_train, lr_range_test};
use crate::{Error, Result};

/// Training pool, held-out validation set and test set of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Loads the configured data set and splits validation images off the
/// training set with a seeded permutation.
pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    let splits = load_named(&cfg.dataset, &cfg.data_root())?;
    let pool = if cfg.train_subset > 0 {
        splits.train.head(cfg.train_subset + cfg.val_size)
    } else {
        splits.train
    };
    if cfg.val_size >= pool.len() {
        return Err(Error::Config(format!("val_size {} leaves no training images out of {}", cfg.val_size, pool.len())));
    }
    let perm = seeded_permutation(pool.len(), derive_seed(cfg.seed, "val-split", 0));
    let mut val_idx = perm[..cfg.val_size].to_vec();
    let mut train_idx = perm[cfg.val_size..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let test = if cfg.test_subset > 0 {
        splits.test.head(cfg.test_subset)
    } else {
        splits.test
    };
    Ok(Prepared {
        train: pool.subset(&train_idx),
        val: pool.subset(&val_idx),
        test,
    })
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn model_checkpoint(model: &Model<f32>, cfg: &RunConfig) -> Checkpoint {
    Checkpoint::from_model(model)
        .with_meta("arch", &cfg.arch)
        .with_meta("pnil", cfg.pnil)
        .with_meta("dataset", &cfg.dataset)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainSummary {
    epochs_run: usize,
    iterations: usize,
    best_epoch: Option<usize>,
    stopped_early: bool,
    adv_val_loss: Vec<f64>,
    clean_val_acc: Vec<f64>,
}

/// Trains a model and writes per-epoch checkpoints, the log, the selected
/// model (`model.afck`) and the manifest.
pub fn cmd_train(cfg: &RunConfig, config_path: Option<&Path>) -> Result<RunManifest> {
    let data = prepare_data(cfg)?;
    let dir = out_dir(cfg)?;
    let mut model = cfg.build_model(data.train.sample_shape(), data.train.num_classes)?;
    info!(
        "training {} ({} parameters) on {} images, validating on {}",
        model.arch,
        model.param_count(),
        data.train.len(),
        data.val.len()
    );
    let outcome = adversarial_train(&mut model, &data.train, &data.val, &cfg.train_config()?, Some(&dir))?;
    let mut manifest = RunManifest::new("train", config_path, cfg);
    for r in &outcome.records {
        if let Some(p) = &r.path {
            manifest.add(p);
        }
    }
    manifest.add(&dir.join("train_log.csv"));
    let model_path = dir.join("model.afck");
    let best_epoch = outcome.best.map(|i| outcome.records[i].epoch);
    let mut ckpt = model_checkpoint(&model, cfg);
    if let Some(e) = best_epoch {
        ckpt = ckpt.with_meta("epoch", e);
    }
    save_checkpoint(&model_path, &ckpt)?;
    manifest.add(&model_path);
    let summary_path = dir.join("train_summary.json");
    write_json(
        &summary_path,
        &TrainSummary {
            epochs_run: outcome.records.len(),
            iterations: outcome.iterations,
            best_epoch,
            stopped_early: outcome.stopped_early,
            adv_val_loss: outcome.records.iter().map(|r| r.adv_val_loss).collect(),
            clean_val_acc: outcome.records.iter().map(|r| r.clean_val_acc).collect(),
        },
    )?;
    manifest.add(&summary_path);
    manifest.save()?;
    Ok(manifest)
}

/// Builds the configured model and loads `path` into it.
pub fn load_model(cfg: &RunConfig, path: &Path, data: &Dataset) -> Result<Model<f32>> {
    let mut model = cfg.build_model(data.sample_shape(), data.num_classes)?;
    model
        .load_params(&load_checkpoint(path)?)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(model)
}

fn default_checkpoint(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| Path::new(&cfg.out_dir).join("model.afck"), Path::to_path_buf)
}

/// Optional curves computed alongside an evaluation.
#[derive(Debug, Clone, Default)]
pub struct EvalExtras {
    /// Multipliers of `eps` for the perturbation-bound sweep.
    pub eps_multipliers: Vec<f32>,
    /// Monte Carlo counts for the EOT sensitivity curve.
    pub eot_values: Vec<usize>,
}

/// Evaluates a checkpoint on the test set and writes the report as CSV,
/// JSON and a text table.
pub fn cmd_eval(cfg: &RunConfig, config_path: Option<&Path>, checkpoint: Option<&Path>, extras: &EvalExtras) -> Result<(RunManifest, EvalReport)> {
    let data = prepare_data(cfg)?;
    let dir = out_dir(cfg)?;
    let model = load_model(cfg, &default_checkpoint(cfg, checkpoint), &data.test)?;
    let ecfg = cfg.eval_config()?;
    let report = evaluate_robustness(&model, &data.test, &ecfg)?;
    info!("evaluation finished in {:.1}s", report.runtime_secs);
    let mut manifest = RunManifest::new("eval", config_path, cfg);
    let csv = dir.join("eval_report.csv");
    write_text(&csv, &report.to_csv())?;
    manifest.add(&csv);
    let json = dir.join("eval_report.json");
    write_json(&json, &report)?;
    manifest.add(&json);
    let table = dir.join("eval_report.txt");
    write_text(&table, &report.to_table(&run_label(cfg)))?;
    manifest.add(&table);
    if !extras.eps_multipliers.is_empty() {
        let rows = perturbation_sweep(&model, &data.test, &ecfg, &extras.eps_multipliers)?;
        let p = dir.join("perturbation_sweep.csv");
        write_curve_csv(&p, ["eps", "pgd_accuracy"], rows.into_iter().map(|(_, e, a)| (e, a)))?;
        manifest.add(&p);
    }
    if !extras.eot_values.is_empty() {
        let rows = eot_sensitivity(&model, &data.test, &ecfg, &extras.eot_values)?;
        let p = dir.join("eot_curve.csv");
        write_curve_csv(&p, ["eot_l", "pgd_accuracy"], rows)?;
        manifest.add(&p);
    }
    manifest.save()?;
    Ok((manifest, report))
}

fn run_label(cfg: &RunConfig) -> String {
    format!("{}{}", cfg.attack, if cfg.pnil { "+pnil" } else { "" })
}

/// Attack settings for `kind` taken from the evaluation keys of `cfg`.
pub fn attack_config(cfg: &RunConfig, kind: AttackKind, stochastic: bool) -> AttackConfig {
    let mut a = AttackConfig::new(kind, cfg.eps()).with_seed(derive_seed(cfg.seed, "attack-dump", 0));
    match kind {
        AttackKind::Pgd => {
            a.steps = cfg.pgd_steps;
            a.random_start = cfg.pgd_random_start;
        }
        AttackKind::Spsa => {
            a.steps = cfg.spsa_steps;
            a.spsa_samples = cfg.spsa_samples;
            a.spsa_delta = cfg.spsa_delta as f32;
            a.spsa_lr = cfg.spsa_lr as f32;
        }
        _ => {}
    }
    if stochastic {
        a.eot_l = cfg.eot_l;
    }
    a
}

/// Attacks the first `count` test images and dumps the clean inputs, the
/// adversarial inputs and the labels into `adversarial.afck`.
pub fn cmd_attack(cfg: &RunConfig, config_path: Option<&Path>, checkpoint: Option<&Path>, count: usize) -> Result<(RunManifest, f64)> {
    let data = prepare_data(cfg)?;
    let dir = out_dir(cfg)?;
    let model = load_model(cfg, &default_checkpoint(cfg, checkpoint), &data.test)?;
    let kind: AttackKind = cfg.attack.parse()?;
    let a = attack_config(cfg, kind, model.is_stochastic());
    let test = data.test.head(count);
    let ids: Vec<u64> = (0..test.len() as u64).collect();
    let ctx = if kind == AttackKind::Nfgsm { Context::Train } else { Context::Eval };
    let adv = run_attack(&model, Batch::new(&test.images, &test.labels, &ids)?, &a, ctx)?;
    let rate = 100.0 * adv.success.iter().filter(|&&s| s).count() as f64 / adv.success.len().max(1) as f64;
    let labels = Tensor::new([test.len()], test.labels.iter().map(|&l| l as f32).collect())?;
    let ckpt = Checkpoint {
        tensors: vec![("x".into(), test.images.clone()), ("x_adv".into(), adv.x_adv), ("labels".into(), labels)],
        metadata: Default::default(),
    }
    .with_meta("attack", kind)
    .with_meta("eps", cfg.eps)
    .with_meta("success_rate", rate);
    let path = dir.join("adversarial.afck");
    save_checkpoint(&path, &ckpt)?;
    let mut manifest = RunManifest::new("attack", config_path, cfg);
    manifest.add(&path);
    manifest.save()?;
    Ok((manifest, rate))
}

/// Gradient checks of `count` random networks; returns whether all passed
/// and a listing of failing coordinates.
pub fn cmd_gradcheck(count: usize, seed: u64) -> Result<(bool, String)> {
    let mut out = String::new();
    let mut ok = true;
    let mut worst = 0.0f64;
    for (i, case) in random_suite(count, seed).iter().enumerate() {
        let r = check_case(case)?;
        worst = worst.max(r.max_rel_error);
        if !r.passed() {
            ok = false;
            for (idx, a, n) in &r.failures {
                let _ = writeln!(out, "FAIL case {i} ({}): coordinate {idx}, analytic {a:e}, numeric {n:e}", case.name);
            }
        }
    }
    let _ = writeln!(out, "{count} networks checked in f64, worst relative error {worst:.3e}: {}", if ok { "pass" } else { "FAIL" });
    Ok((ok, out))
}

/// Learning-rate range test; writes the curve and suggested bounds.
pub fn cmd_lr_find(cfg: &RunConfig, config_path: Option<&Path>) -> Result<(RunManifest, Option<(f64, f64)>)> {
    let data = prepare_data(cfg)?;
    let dir = out_dir(cfg)?;
    let model = cfg.build_model(data.train.sample_shape(), data.train.num_classes)?;
    let tc = cfg.train_config()?;
    tc.validate()?;
    let attack = tc.attack;
    let curve = lr_range_test(
        &model,
        &data.train,
        (cfg.lr_find_lo, cfg.lr_find_hi),
        cfg.lr_find_iters,
        cfg.batch_size,
        attack.as_ref(),
        derive_seed(cfg.seed, "lr-find", 0),
    )?;
    if curve.diverged {
        info!("loss diverged after {} iterations", curve.points.len());
    }
    let mut manifest = RunManifest::new("lr-find", config_path, cfg);
    let p = dir.join("lr_find.csv");
    write_curve_csv(&p, ["lr", "smoothed_loss"], curve.points.iter().copied())?;
    manifest.add(&p);
    let bounds = curve.suggest_bounds();
    let j = dir.join("lr_find.json");
    write_json(
        &j,
        &serde_json::json!({
            "argmin_lr": curve.argmin_lr(),
            "lr_lo": bounds.map(|b| b.0),
            "lr_hi": bounds.map(|b| b.1),
            "diverged": curve.diverged,
        }),
    )?;
    manifest.add(&j);
    manifest.save()?;
    Ok((manifest, bounds))
}

/// Stored result of one cross-validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub repeat: usize,
    pub fold: usize,
    pub config_hash: String,
    pub report: EvalReport,
}

/// Aggregate of a finished experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub rows: Vec<SummaryRow>,
    pub ttest: TTestResult,
    pub train_size: usize,
    pub test_size: usize,
}

impl ExperimentSummary {
    pub fn to_text(&self) -> String {
        let mut out = format_summary_table(&self.rows);
        let t = &self.ttest;
        let _ = writeln!(
            out,
            "paired min difference {:+.2} over {} runs: t = {:.3}, p = {:.4}, alpha = {}{}",
            t.mean_diff,
            t.n,
            t.t,
            t.p,
            t.alpha,
            if t.significant { " (significant)" } else { "" }
        );
        out
    }
}

fn config_fingerprint(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.out_dir.clear();
    format!("{:016x}", fnv1a(&c.to_text()))
}

/// Repeated two-fold cross-validation of the configured training attack with
/// and without the noise layer. Finished runs are stored under `runs/` and
/// reused on restart.
pub fn cmd_experiment(cfg: &RunConfig, config_path: Option<&Path>) -> Result<(RunManifest, ExperimentSummary)> {
    cfg.train_config()?.validate()?;
    let data = prepare_data(cfg)?;
    let dir = out_dir(cfg)?;
    let runs_dir = dir.join("runs");
    std::fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    let plan = make_cv_plan(data.train.len(), data.test.len(), cfg.repeats, derive_seed(cfg.seed, "cv", 0));
    let mut manifest = RunManifest::new("experiment", config_path, cfg);
    let mut reports: [Vec<EvalReport>; 2] = [Vec::new(), Vec::new()];
    let mut labels = [String::new(), String::new()];
    for (v, pnil) in [false, true].into_iter().enumerate() {
        let mut vcfg = cfg.clone();
        vcfg.pnil = pnil;
        labels[v] = run_label(&vcfg);
        for (ri, run) in plan.runs.iter().enumerate() {
            let mut rcfg = vcfg.clone();
            rcfg.seed = derive_seed(cfg.seed, "cv-run", ri as u64);
            let name = format!("{}_r{}_f{}", labels[v].replace('+', "-"), run.repeat, run.fold);
            let result_path = runs_dir.join(format!("{name}.json"));
            let model_path = runs_dir.join(format!("{name}.afck"));
            let hash = config_fingerprint(&rcfg);
            let result = if result_path.exists() {
                let text = std::fs::read_to_string(&result_path).map_err(|e| Error::io(&result_path, e))?;
                let r: RunResult = serde_json::from_str(&text).map_err(|e| Error::State(format!("{}: {e}", result_path.display())))?;
                if r.config_hash != hash || r.repeat != run.repeat || r.fold != run.fold {
                    return Err(Error::State(format!("{} was produced by a different configuration", result_path.display())));
                }
                info!("reusing {name}");
                r
            } else {
                info!("run {name}: training on {} images", run.train.len());
                let train = data.train.subset(&run.train);
                let test = data.test.subset(&run.test);
                let mut model = rcfg.build_model(train.sample_shape(), train.num_classes)?;
                adversarial_train(&mut model, &train, &data.val, &rcfg.train_config()?, None)?;
                save_checkpoint(&model_path, &model_checkpoint(&model, &rcfg))?;
                let report = evaluate_robustness(&model, &test, &rcfg.eval_config()?)?;
                let r = RunResult {
                    label: labels[v].clone(),
                    repeat: run.repeat,
                    fold: run.fold,
                    config_hash: hash,
                    report,
                };
                write_json(&result_path, &r)?;
                r
            };
            if model_path.exists() {
                manifest.add(&model_path);
            }
            manifest.add(&result_path);
            reports[v].push(result.report);
        }
    }
    let diffs: Vec<f64> = reports[1]
        .iter()
        .zip(&reports[0])
        .map(|(p, b)| p.effective_robustness - b.effective_robustness)
        .collect();
    let (train_half, test_half) = plan.runs.first().map_or((0, 0), |r| (r.train.len(), r.test.len()));
    let ttest = corrected_resampled_ttest(&diffs, test_half as f64 / train_half.max(1) as f64, DEFAULT_ALPHA)?;
    if ttest.degenerate {
        warn!("all paired differences are identical; the t statistic is degenerate");
    }
    let mut rows = vec![
        SummaryRow::from_reports(&labels[0], &reports[0]),
        SummaryRow::from_reports(&labels[1], &reports[1]),
    ];
    rows[1].star = ttest.significant;
    let summary = ExperimentSummary {
        rows,
        ttest,
        train_size: train_half,
        test_size: test_half,
    };
    let j = dir.join("experiment.json");
    write_json(&j, &summary)?;
    manifest.add(&j);
    let t = dir.join("experiment.txt");
    write_text(&t, &summary.to_text())?;
    manifest.add(&t);
    manifest.save()?;
    Ok((manifest, summary))
}

/// Renders stored results: an experiment directory, an evaluation directory
/// or an `eval_report.json` file.
pub fn cmd_report(paths: &[PathBuf]) -> Result<String> {
    let mut out = String::new();
    for path in paths {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        let parse_err = |p: &Path, e: serde_json::Error| Error::State(format!("{}: {e}", p.display()));
        let exp = path.join("experiment.json");
        let eval = if path.is_dir() { path.join("eval_report.json") } else { path.clone() };
        if exp.is_file() {
            let s: ExperimentSummary = serde_json::from_str(&read(&exp)?).map_err(|e| parse_err(&exp, e))?;
            out.push_str(&s.to_text());
        } else {
            let r: EvalReport = serde_json::from_str(&read(&eval)?).map_err(|e| parse_err(&eval, e))?;
            let dir = if path.is_dir() { path.as_path() } else { path.parent().unwrap_or(Path::new(".")) };
            let label = dir.file_name().map_or_else(|| "model".to_string(), |n| n.to_string_lossy().into_owned());
            out.push_str(&r.to_table(&label));
        }
    }
    Ok(out)
}
