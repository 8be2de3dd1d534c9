use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Points by which SPSA must undercut PGD before a model is flagged.
pub const OBFUSCATION_MARGIN: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackAccuracy {
    pub attack: String,
    /// Percent.
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<AttackAccuracy>,
    /// Minimum accuracy over `rows`.
    pub effective_robustness: f64,
    /// SPSA accuracy below PGD accuracy by more than the margin.
    pub obfuscation_flag: bool,
    pub eot_l: usize,
    /// Test indices attacked with SPSA.
    pub spsa_subset: Vec<usize>,
    pub config_hash: String,
    /// Wall-clock seconds. Kept out of the emitted files so that reports are
    /// reproducible byte for byte.
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl EvalReport {
    pub fn new(rows: Vec<AttackAccuracy>, eot_l: usize, spsa_subset: Vec<usize>, config_hash: String, runtime_secs: f64) -> Self {
        let effective_robustness = rows.iter().map(|r| r.accuracy).fold(f64::INFINITY, f64::min);
        let mut report = Self {
            rows,
            effective_robustness,
            obfuscation_flag: false,
            eot_l,
            spsa_subset,
            config_hash,
            runtime_secs,
        };
        if let (Some(spsa), Some(pgd)) = (report.accuracy("spsa"), report.accuracy("pgd")) {
            report.obfuscation_flag = spsa < pgd - OBFUSCATION_MARGIN;
        }
        report
    }

    pub fn accuracy(&self, attack: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.attack == attack).map(|r| r.accuracy)
    }

    /// One row per attack plus a `min` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("attack,accuracy,samples\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.attack, r.accuracy, r.samples);
        }
        let _ = writeln!(out, "min,{},", self.effective_robustness);
        out
    }

    /// Clean / SPSA / PGD / Min layout.
    pub fn to_table(&self, label: &str) -> String {
        let cell = |a: &str| self.accuracy(a).map_or("-".to_string(), |v| format!("{v:.1}"));
        let mut out = format!("{:<24} {:>7} {:>7} {:>7} {:>7}\n", "model", "Clean", "SPSA", "PGD", "Min");
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>7} {:>7} {:>7.1}",
            label,
            cell("clean"),
            cell("spsa"),
            cell("pgd"),
            self.effective_robustness
        );
        let _ = writeln!(
            out,
            "eot_l = {}, config {}, obfuscation flag: {}",
            self.eot_l, self.config_hash, self.obfuscation_flag
        );
        out
    }
}

/// Aggregate over cross-validation runs for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    /// `(attack, mean, std)` in percent.
    pub attacks: Vec<(String, f64, f64)>,
    pub min_mean: f64,
    pub min_std: f64,
    /// Significantly different from the paired configuration.
    pub star: bool,
}

impl SummaryRow {
    pub fn from_reports(label: &str, reports: &[EvalReport]) -> Self {
        let stats = |v: &[f64]| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        };
        let names: Vec<String> = reports.first().map_or(Vec::new(), |r| r.rows.iter().map(|a| a.attack.clone()).collect());
        let attacks = names
            .into_iter()
            .map(|name| {
                let v: Vec<f64> = reports.iter().filter_map(|r| r.accuracy(&name)).collect();
                let (m, s) = stats(&v);
                (name, m, s)
            })
            .collect();
        let mins: Vec<f64> = reports.iter().map(|r| r.effective_robustness).collect();
        let (min_mean, min_std) = stats(&mins);
        Self {
            label: label.to_string(),
            attacks,
            min_mean,
            min_std,
            star: false,
        }
    }

    fn cell(&self, attack: &str) -> String {
        self.attacks
            .iter()
            .find(|a| a.0 == attack)
            .map_or("-".to_string(), |(_, m, s)| format!("{m:.1}±{s:.1}"))
    }
}

/// Mean±std table; starred minima differ significantly from their pair.
pub fn format_summary_table(rows: &[SummaryRow]) -> String {
    let mut out = format!("{:<24} {:>11} {:>11} {:>11} {:>12}\n", "model", "Clean", "SPSA", "PGD", "Min");
    for r in rows {
        let min = format!("{:.1}±{:.1}{}", r.min_mean, r.min_std, if r.star { "*" } else { "" });
        let _ = writeln!(
            out,
            "{:<24} {:>11} {:>11} {:>11} {:>12}",
            r.label,
            r.cell("clean"),
            r.cell("spsa"),
            r.cell("pgd"),
            min
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(a: &str, acc: f64) -> AttackAccuracy {
        AttackAccuracy {
            attack: a.into(),
            accuracy: acc,
            samples: 10,
        }
    }

    #[test]
    fn min_and_flag() {
        let r = EvalReport::new(vec![row("clean", 98.0), row("spsa", 65.0), row("pgd", 57.0)], 100, vec![], "h".into(), 0.0);
        assert_eq!(r.effective_robustness, 57.0);
        assert!(!r.obfuscation_flag);
        let r = EvalReport::new(vec![row("clean", 90.0), row("spsa", 2.0), row("pgd", 60.0)], 1, vec![], "h".into(), 0.0);
        assert!(r.obfuscation_flag);
        assert_eq!(r.effective_robustness, 2.0);
        assert!(r.to_csv().contains("min,2,"));
    }
}
