use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::{Error, Result};

/// Significance level used for starring differences.
pub const DEFAULT_ALPHA: f64 = 0.003;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub mean_diff: f64,
    /// Sample variance of the differences (n - 1 denominator).
    pub var_diff: f64,
    pub n: usize,
    /// Test-to-train size ratio.
    pub ratio: f64,
    pub t: f64,
    pub p: f64,
    pub alpha: f64,
    pub significant: bool,
    /// Zero variance with a nonzero mean.
    pub degenerate: bool,
}

/// Two-sided Student-t tail probability `P(|T| >= |t|)` with `df` degrees
/// of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

/// Paired t-test with the variance inflated by `1/n + ratio` to account for
/// overlapping training sets across resamples.
pub fn corrected_resampled_ttest(diffs: &[f64], ratio: f64, alpha: f64) -> Result<TTestResult> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::Config(format!("t-test needs at least 2 differences, got {n}")));
    }
    if !(ratio > 0.0) {
        return Err(Error::Config(format!("test/train ratio must be > 0, got {ratio}")));
    }
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let (t, p, degenerate) = if var == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0, false)
        } else {
            (mean.signum() * f64::INFINITY, 0.0, true)
        }
    } else {
        let t = mean / ((1.0 / nf + ratio) * var).sqrt();
        (t, student_t_two_sided(t, nf - 1.0).clamp(0.0, 1.0), false)
    };
    Ok(TTestResult {
        mean_diff: mean,
        var_diff: var,
        n,
        ratio,
        t,
        p,
        alpha,
        significant: p < alpha,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_diffs() {
        let r = corrected_resampled_ttest(&[0.0; 10], 1.0, DEFAULT_ALPHA).unwrap();
        assert_eq!((r.t, r.p, r.significant), (0.0, 1.0, false));
    }

    #[test]
    fn constant_nonzero_diffs_are_degenerate() {
        let r = corrected_resampled_ttest(&[2.0; 10], 1.0, DEFAULT_ALPHA).unwrap();
        assert!(r.degenerate && r.p == 0.0 && r.significant);
    }

    #[test]
    fn symmetric_and_scale_free() {
        let d = [1.5, -0.3, 2.2, 0.9, 1.1, 0.4, 3.0, -1.0, 0.8, 1.7];
        let a = corrected_resampled_ttest(&d, 1.0, DEFAULT_ALPHA).unwrap();
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        let b = corrected_resampled_ttest(&neg, 1.0, DEFAULT_ALPHA).unwrap();
        assert_eq!(a.t, -b.t);
        assert_eq!(a.p, b.p);
        let scaled: Vec<f64> = d.iter().map(|v| v * 4.0).collect();
        let c = corrected_resampled_ttest(&scaled, 1.0, DEFAULT_ALPHA).unwrap();
        assert!((a.t - c.t).abs() < 1e-12);
    }

    #[test]
    fn one_degree_of_freedom_is_cauchy() {
        // P(|T| >= 1) for df = 1 is 1/2
        assert!((student_t_two_sided(1.0, 1.0) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn rejects_short_input() {
        assert!(corrected_resampled_ttest(&[1.0], 1.0, DEFAULT_ALPHA).is_err());
        assert!(corrected_resampled_ttest(&[1.0, 2.0], 0.0, DEFAULT_ALPHA).is_err());
    }
}
