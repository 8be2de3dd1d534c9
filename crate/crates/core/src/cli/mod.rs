//! Command-line front end. Every command resolves a [`RunConfig`], writes its
//! outputs under `out_dir` and records them in a [`RunManifest`].

mod commands;
mod config;
mod manifest;

pub use commands::{
    attack_config, cmd_attack, cmd_eval, cmd_experiment, cmd_gradcheck, cmd_lr_find, cmd_report, cmd_train, load_model, prepare_data,
    EvalExtras, ExperimentSummary, Prepared, RunResult,
};
pub use config::{Rational, RunConfig};
pub use manifest::{read_config, RunManifest};

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "robustkit", version, about = "Adversarial training and robustness evaluation")]
pub struct Cli {
    /// Worker threads (0 uses all cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by the commands that read a run configuration.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// `key = value` file or a manifest to replay.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub attack: Option<String>,
    /// Exact literal such as `8/255` or `0.3`.
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<String>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_config(p)?,
            None => RunConfig::default(),
        };
        let mut apply = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(k, &v));
        apply("dataset", self.dataset.clone())?;
        apply("attack", self.attack.clone())?;
        apply("eps", self.eps.clone())?;
        apply("epochs", self.epochs.map(|v| v.to_string()))?;
        apply("seed", self.seed.map(|v| v.to_string()))?;
        apply("out_dir", self.out.clone())?;
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn path(&self) -> Option<&Path> {
        self.config.as_deref()
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Adversarially train a model.
    Train(RunArgs),
    /// Evaluate a checkpoint against clean, PGD and SPSA inputs.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to `<out>/model.afck`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated multipliers of eps for a PGD sweep.
        #[arg(long, value_delimiter = ',')]
        eps_sweep: Vec<f32>,
        /// Comma-separated Monte Carlo counts for an EOT curve.
        #[arg(long, value_delimiter = ',')]
        eot_sweep: Vec<usize>,
    },
    /// Dump adversarial examples for the first test images.
    Attack {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Check analytic gradients of random networks against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Repeated two-fold cross-validation with and without the noise layer.
    Experiment(RunArgs),
    /// Learning-rate range test.
    LrFind(RunArgs),
    /// Print tables for stored evaluation or experiment results.
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Train(run) => {
            let m = cmd_train(&run.resolve()?, run.path())?;
            println!("wrote {} artifacts to {}", m.artifacts.len(), m.config.out_dir);
        }
        Command::Eval {
            run,
            checkpoint,
            eps_sweep,
            eot_sweep,
        } => {
            let cfg = run.resolve()?;
            let extras = EvalExtras {
                eps_multipliers: eps_sweep,
                eot_values: eot_sweep,
            };
            let (m, report) = cmd_eval(&cfg, run.path(), checkpoint.as_deref(), &extras)?;
            print!("{}", report.to_table(&m.config.out_dir));
        }
        Command::Attack { run, checkpoint, count } => {
            let (m, rate) = cmd_attack(&run.resolve()?, run.path(), checkpoint.as_deref(), count)?;
            println!("success rate {rate:.2}%, wrote {}", m.artifacts.join(", "));
        }
        Command::Gradcheck { count, seed } => {
            let (ok, text) = cmd_gradcheck(count, seed)?;
            print!("{text}");
            if !ok {
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::Experiment(run) => {
            let (_, summary) = cmd_experiment(&run.resolve()?, run.path())?;
            print!("{}", summary.to_text());
        }
        Command::LrFind(run) => {
            let (_, bounds) = cmd_lr_find(&run.resolve()?, run.path())?;
            match bounds {
                Some((lo, hi)) => println!("suggested lr_lo = {lo:e}, lr_hi = {hi:e}"),
                None => println!("no finite loss observed"),
            }
        }
        Command::Report { paths } => print!("{}", cmd_report(&paths)?),
    }
    Ok(EXIT_OK)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} workers: {e}", cli.workers);
            return EXIT_USAGE;
        }
    };
    match pool.install(|| execute(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_USAGE
            }
        }
    }
}
