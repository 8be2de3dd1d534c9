use crate::{Error, Result};

/// Triangular cyclical learning rate: `lo` at the start and end of each
/// cycle, `hi` halfway through, linear in between.
pub fn cyclical_lr(iteration: usize, lo: f64, hi: f64, cycle_len: usize) -> f64 {
    let half = cycle_len as f64 / 2.0;
    let pos = (iteration % cycle_len.max(1)) as f64;
    let frac = if pos <= half { pos / half } else { (cycle_len as f64 - pos) / half };
    lo * (1.0 - frac) + hi * frac
}

/// Loss against learning rate from a linear sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct LrCurve {
    /// `(lr, smoothed loss)` per completed iteration.
    pub points: Vec<(f64, f64)>,
    /// The sweep stopped because the smoothed loss exceeded four times the
    /// first loss.
    pub diverged: bool,
}

impl LrCurve {
    /// Learning rate at the lowest smoothed loss.
    pub fn argmin_lr(&self) -> Option<f64> {
        self.points
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|p| p.0)
    }

    /// Cyclical bounds: `hi` is half the rate at the loss minimum, `lo` a
    /// tenth of `hi`.
    pub fn suggest_bounds(&self) -> Option<(f64, f64)> {
        let hi = self.argmin_lr()? / 2.0;
        Some((hi / 10.0, hi))
    }
}

/// Exponential smoothing factor for the sweep curve.
const SMOOTHING: f64 = 0.9;

/// Runs `iters` updates with the learning rate swept linearly from
/// `span.0` to `span.1`. `step(i, lr)` performs update `i` and returns the
/// loss it observed.
pub fn lr_sweep<F>(span: (f64, f64), iters: usize, mut step: F) -> Result<LrCurve>
where
    F: FnMut(usize, f64) -> Result<f64>,
{
    let (lo, hi) = span;
    if !(lo > 0.0 && hi > lo) || iters < 2 {
        return Err(Error::Config(format!(
            "learning-rate sweep needs 0 < lo < hi and at least 2 iterations, got ({lo}, {hi}) over {iters}"
        )));
    }
    let mut points = Vec::with_capacity(iters);
    let mut avg = 0.0;
    let mut first = None;
    for i in 0..iters {
        let lr = lo + (hi - lo) * i as f64 / (iters - 1) as f64;
        let loss = step(i, lr)?;
        if !loss.is_finite() {
            return Ok(LrCurve { points, diverged: true });
        }
        avg = SMOOTHING * avg + (1.0 - SMOOTHING) * loss;
        let smoothed = avg / (1.0 - SMOOTHING.powi(i as i32 + 1));
        points.push((lr, smoothed));
        let first = *first.get_or_insert(loss);
        if smoothed > 4.0 * first && first > 0.0 {
            return Ok(LrCurve { points, diverged: true });
        }
    }
    Ok(LrCurve { points, diverged: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_points() {
        assert_eq!(cyclical_lr(0, 0.001, 0.01, 100), 0.001);
        assert_eq!(cyclical_lr(50, 0.001, 0.01, 100), 0.01);
        assert!((cyclical_lr(25, 0.001, 0.01, 100) - 0.0055).abs() < 1e-15);
        assert!((cyclical_lr(75, 0.001, 0.01, 100) - 0.0055).abs() < 1e-15);
        assert_eq!(cyclical_lr(100, 0.001, 0.01, 100), 0.001);
    }

    #[test]
    fn flat_loss_gives_flat_curve() {
        let c = lr_sweep((1e-4, 1.0), 20, |_, _| Ok(2.5)).unwrap();
        assert!(!c.diverged);
        assert!(c.points.iter().all(|p| (p.1 - 2.5).abs() < 1e-12));
        assert_eq!(c.points.first().unwrap().0, 1e-4);
        assert_eq!(c.points.last().unwrap().0, 1.0);
    }

    #[test]
    fn rejects_bad_span() {
        assert!(lr_sweep((0.1, 0.01), 10, |_, _| Ok(1.0)).is_err());
    }
}
