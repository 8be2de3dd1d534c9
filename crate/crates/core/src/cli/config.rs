//! Plain-text run configuration: one `key = value` per line, `#` comments.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackKind};
use crate::eval::{EvalAttack, EvalConfig};
use crate::models::{build_resnet11, build_small_cnn, Model, PnilInit, ResNetConfig, SmallCnnConfig};
use crate::training::{AdamConfig, TrainConfig};
use crate::{Error, Result};

/// An exact `num/den` literal; decimals such as `0.25` are read as `25/100`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rational {
    pub num: i64,
    pub den: i64,
}

impl Rational {
    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Rational {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid number {s:?}"));
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let num = n.trim().parse::<i64>().map_err(|_| bad())?;
            let den = d.trim().parse::<i64>().map_err(|_| bad())?;
            if den <= 0 {
                return Err(bad());
            }
            return Ok(Self { num, den });
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 15 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10i64.pow(frac.len() as u32);
        let neg = int.starts_with('-');
        let whole = if int.is_empty() || int == "-" { 0 } else { int.parse::<i64>().map_err(|_| bad())? };
        let f = if frac.is_empty() { 0 } else { frac.parse::<i64>().map_err(|_| bad())? };
        let num = whole
            .checked_mul(den)
            .and_then(|w| if neg { w.checked_sub(f) } else { w.checked_add(f) })
            .ok_or_else(bad)?;
        Ok(Self { num, den })
    }
}

/// Every setting of a run. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: String,
    /// Directory holding the data sets; empty uses `$ROBUSTKIT_DATA` or `data/`.
    pub data_root: String,
    /// Leading training images kept; 0 keeps all.
    pub train_subset: usize,
    /// Images held out of the training set for validation.
    pub val_size: usize,
    /// Leading test images evaluated; 0 keeps all.
    pub test_subset: usize,
    pub arch: String,
    pub channels: (usize, usize),
    pub pnil: bool,
    pub pnil_weight: f64,
    pub pnil_bias: f64,
    pub attack: String,
    pub eps: Rational,
    pub train_eot_l: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_lo: f64,
    pub lr_hi: f64,
    /// Iterations per cycle; 0 uses four epochs.
    pub cycle_len: usize,
    pub patience: usize,
    pub val_pgd_steps: usize,
    pub eval_attacks: Vec<String>,
    pub eot_l: usize,
    pub pgd_steps: usize,
    pub pgd_random_start: bool,
    pub spsa_steps: usize,
    pub spsa_samples: usize,
    pub spsa_subset: usize,
    pub spsa_delta: f64,
    pub spsa_lr: f64,
    pub lr_find_lo: f64,
    pub lr_find_hi: f64,
    pub lr_find_iters: usize,
    pub repeats: usize,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            data_root: String::new(),
            train_subset: 0,
            val_size: 1000,
            test_subset: 0,
            arch: "small-cnn".into(),
            channels: (16, 32),
            pnil: true,
            pnil_weight: 0.0,
            pnil_bias: -3.0,
            attack: "nfgsm".into(),
            eps: Rational { num: 8, den: 255 },
            train_eot_l: 1,
            epochs: 30,
            batch_size: 100,
            lr_lo: 1e-4,
            lr_hi: 1e-3,
            cycle_len: 0,
            patience: 10,
            val_pgd_steps: 10,
            eval_attacks: vec!["clean".into(), "pgd".into(), "spsa".into()],
            eot_l: 100,
            pgd_steps: 50,
            pgd_random_start: true,
            spsa_steps: 100,
            spsa_samples: 2048,
            spsa_subset: 1000,
            spsa_delta: 0.01,
            spsa_lr: 0.01,
            lr_find_lo: 1e-6,
            lr_find_hi: 1e-1,
            lr_find_iters: 100,
            repeats: 5,
            seed: 0,
            out_dir: "runs/default".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key.trim() {
            "dataset" => self.dataset = v.into(),
            "data_root" => self.data_root = v.into(),
            "train_subset" => self.train_subset = parse(key, v)?,
            "val_size" => self.val_size = parse(key, v)?,
            "test_subset" => self.test_subset = parse(key, v)?,
            "arch" => self.arch = v.into(),
            "channels" => {
                let (a, b) = v
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("channels: expected two widths, got {v:?}")))?;
                self.channels = (parse(key, a.trim())?, parse(key, b.trim())?);
            }
            "pnil" => self.pnil = parse_bool(key, v)?,
            "pnil_weight" => self.pnil_weight = parse(key, v)?,
            "pnil_bias" => self.pnil_bias = parse(key, v)?,
            "attack" => self.attack = v.to_ascii_lowercase(),
            "eps" => self.eps = v.parse()?,
            "train_eot_l" => self.train_eot_l = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr_lo" => self.lr_lo = parse(key, v)?,
            "lr_hi" => self.lr_hi = parse(key, v)?,
            "cycle_len" => self.cycle_len = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "val_pgd_steps" => self.val_pgd_steps = parse(key, v)?,
            "eval_attacks" => self.eval_attacks = v.split(',').map(|s| s.trim().to_ascii_lowercase()).collect(),
            "eot_l" => self.eot_l = parse(key, v)?,
            "pgd_steps" => self.pgd_steps = parse(key, v)?,
            "pgd_random_start" => self.pgd_random_start = parse_bool(key, v)?,
            "spsa_steps" => self.spsa_steps = parse(key, v)?,
            "spsa_samples" => self.spsa_samples = parse(key, v)?,
            "spsa_subset" => self.spsa_subset = parse(key, v)?,
            "spsa_delta" => self.spsa_delta = parse(key, v)?,
            "spsa_lr" => self.spsa_lr = parse(key, v)?,
            "lr_find_lo" => self.lr_find_lo = parse(key, v)?,
            "lr_find_hi" => self.lr_find_hi = parse(key, v)?,
            "lr_find_iters" => self.lr_find_iters = parse(key, v)?,
            "repeats" => self.repeats = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = v.into(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key = value` text; parsing it yields `self` again.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Settings as ordered key/value strings.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("dataset", self.dataset.clone());
        put("data_root", self.data_root.clone());
        put("train_subset", self.train_subset.to_string());
        put("val_size", self.val_size.to_string());
        put("test_subset", self.test_subset.to_string());
        put("arch", self.arch.clone());
        put("channels", format!("{},{}", self.channels.0, self.channels.1));
        put("pnil", self.pnil.to_string());
        put("pnil_weight", self.pnil_weight.to_string());
        put("pnil_bias", self.pnil_bias.to_string());
        put("attack", self.attack.clone());
        put("eps", self.eps.to_string());
        put("train_eot_l", self.train_eot_l.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr_lo", self.lr_lo.to_string());
        put("lr_hi", self.lr_hi.to_string());
        put("cycle_len", self.cycle_len.to_string());
        put("patience", self.patience.to_string());
        put("val_pgd_steps", self.val_pgd_steps.to_string());
        put("eval_attacks", self.eval_attacks.join(","));
        put("eot_l", self.eot_l.to_string());
        put("pgd_steps", self.pgd_steps.to_string());
        put("pgd_random_start", self.pgd_random_start.to_string());
        put("spsa_steps", self.spsa_steps.to_string());
        put("spsa_samples", self.spsa_samples.to_string());
        put("spsa_subset", self.spsa_subset.to_string());
        put("spsa_delta", self.spsa_delta.to_string());
        put("spsa_lr", self.spsa_lr.to_string());
        put("lr_find_lo", self.lr_find_lo.to_string());
        put("lr_find_hi", self.lr_find_hi.to_string());
        put("lr_find_iters", self.lr_find_iters.to_string());
        put("repeats", self.repeats.to_string());
        put("seed", self.seed.to_string());
        put("out_dir", self.out_dir.clone());
        m
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.dataset.as_str(), "mnist" | "fashion-mnist" | "cifar10") {
            return Err(Error::Config(format!("unknown dataset {:?}", self.dataset)));
        }
        if !matches!(self.arch.as_str(), "small-cnn" | "resnet11") {
            return Err(Error::Config(format!("unknown arch {:?}", self.arch)));
        }
        if self.eps.value() < 0.0 {
            return Err(Error::Config("eps must be >= 0".into()));
        }
        let mut tc = self.train_config()?;
        tc.attack = None;
        tc.validate()?;
        self.eval_config()?;
        Ok(())
    }

    pub fn eps(&self) -> f32 {
        self.eps.value() as f32
    }

    pub fn data_root(&self) -> PathBuf {
        if self.data_root.is_empty() {
            crate::data::data_root()
        } else {
            PathBuf::from(&self.data_root)
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let eps = self.eps();
        let attack = match self.attack.as_str() {
            "none" | "clean" => None,
            name => {
                let mut a = AttackConfig::new(name.parse::<AttackKind>()?, eps);
                a.eot_l = self.train_eot_l;
                Some(a)
            }
        };
        let mut val_attack = AttackConfig::new(AttackKind::Pgd, eps);
        val_attack.steps = self.val_pgd_steps;
        val_attack.eot_l = 1;
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            attack,
            adam: AdamConfig::default(),
            lr_lo: self.lr_lo,
            lr_hi: self.lr_hi,
            cycle_len: (self.cycle_len > 0).then_some(self.cycle_len),
            patience: self.patience,
            val_attack,
            restore_best: true,
            seed: self.seed,
        })
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let mut c = EvalConfig::new(self.eps());
        c.attacks = self.eval_attacks.iter().map(|a| EvalAttack::parse(a)).collect::<Result<_>>()?;
        c.eot_l = self.eot_l;
        c.pgd_steps = self.pgd_steps;
        c.pgd_random_start = self.pgd_random_start;
        c.spsa_steps = self.spsa_steps;
        c.spsa_samples = self.spsa_samples;
        c.spsa_subset = self.spsa_subset;
        c.spsa_delta = self.spsa_delta as f32;
        c.spsa_lr = self.spsa_lr as f32;
        c.seed = crate::rng::derive_seed(self.seed, "eval", 0);
        Ok(c)
    }

    pub fn pnil_init(&self) -> Option<PnilInit> {
        self.pnil.then(|| PnilInit {
            weight: self.pnil_weight,
            bias: self.pnil_bias,
            ..PnilInit::default()
        })
    }

    pub fn build_model(&self, in_shape: [usize; 3], num_classes: usize) -> Result<Model<f32>> {
        let seed = crate::rng::derive_seed(self.seed, "model", 0);
        match self.arch.as_str() {
            "resnet11" => build_resnet11(
                in_shape,
                num_classes,
                &ResNetConfig {
                    pnil: self.pnil_init(),
                    ..ResNetConfig::default()
                },
                seed,
            ),
            _ => build_small_cnn(
                in_shape,
                num_classes,
                &SmallCnnConfig {
                    channels: self.channels,
                    pnil: self.pnil_init(),
                    ..SmallCnnConfig::default()
                },
                seed,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rationals() {
        let r: Rational = "8/255".parse().unwrap();
        assert_eq!(r, Rational { num: 8, den: 255 });
        assert_eq!(r.value(), 8.0 / 255.0);
        assert_eq!("0.3".parse::<Rational>().unwrap(), Rational { num: 3, den: 10 });
        assert_eq!("-1.25".parse::<Rational>().unwrap(), Rational { num: -125, den: 100 });
        assert_eq!("2".parse::<Rational>().unwrap(), Rational { num: 2, den: 1 });
        assert!("1/0".parse::<Rational>().is_err());
        assert!("abc".parse::<Rational>().is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("eps", "16/255").unwrap();
        c.set("channels", "8, 16").unwrap();
        c.set("pnil", "no").unwrap();
        let back = RunConfig::parse_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::parse_text("epochs = 3\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(RunConfig::parse_text("attack = bogus\n").is_err());
        assert!(RunConfig::parse_text("attack = pgd\n").unwrap().train_config().unwrap().validate().is_err());
    }
}
