//! Central finite-difference gradients, used as an oracle for `backward`.

use super::{Result, Tensor, TensorError};

/// Coordinates whose `|analytic| + |numeric|` falls below this are skipped.
pub const GRADCHECK_FLOOR: f64 = 1e-8;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn finite_diff_grad<E>(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64, E>,
    x: &Tensor<f64>,
    h: f64,
) -> Result<Tensor<f64>, E>
where
    E: From<TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidShape {
            op: "finite_diff_grad",
            msg: format!("step must be positive, got {h}"),
        }
        .into());
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// `|a - n| / (|a| + |n|)`, or 0 when both are below [`GRADCHECK_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs() + numeric.abs();
    if denom < GRADCHECK_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Worst coordinate found while comparing two gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates exceeding the tolerance: (index, analytic, numeric).
    pub failures: Vec<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn compare(analytic: &Tensor<f64>, numeric: &Tensor<f64>, tol: f64) -> Self {
        let mut report = Self {
            max_rel_error: 0.0,
            worst_index: None,
            checked: 0,
            failures: Vec::new(),
        };
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            if a.abs() + n.abs() < GRADCHECK_FLOOR {
                continue;
            }
            report.checked += 1;
            let e = relative_error(a, n);
            if e > report.max_rel_error || report.worst_index.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst_index = Some(i);
            }
            if e > tol {
                report.failures.push((i, a, n));
            }
        }
        report
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst_index = other.worst_index;
        }
        self.checked += other.checked;
        self.failures.extend(other.failures);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_one() {
        let x = Tensor::scalar(1.0);
        let g = finite_diff_grad::<TensorError>(|t| Ok(t.item() * t.item()), &x, 1e-5).unwrap();
        assert!((g.item() - 2.0).abs() < 1e-8);
    }

    #[test]
    fn relu_sum_away_from_kink() {
        let x = Tensor::from_f64_slice([2], &[-1.0, 2.0]).unwrap();
        let g = finite_diff_grad::<TensorError>(
            |t| Ok(t.data().iter().map(|v| v.max(0.0)).sum()),
            &x,
            1e-6,
        )
        .unwrap();
        assert!(g.data()[0].abs() < 1e-12);
        assert!((g.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(0.0);
        assert!(finite_diff_grad::<TensorError>(|t| Ok(t.item()), &x, 0.0).is_err());
    }

    #[test]
    fn report_skips_tiny_coordinates() {
        let a = Tensor::from_f64_slice([3], &[1.0, 1e-10, 2.0]).unwrap();
        let n = Tensor::from_f64_slice([3], &[1.0, -1e-10, 2.2]).unwrap();
        let r = GradCheckReport::compare(&a, &n, 1e-4);
        assert_eq!(r.checked, 2);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.worst_index, Some(2));
    }
}
