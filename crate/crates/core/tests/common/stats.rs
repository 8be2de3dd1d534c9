//! Independent evaluation of the corrected resampled t statistic and of the
//! Student-t tail probability by quadrature.

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// `t = mean / sqrt((1/n + ratio) var)` with compensated sums throughout.
pub fn corrected_t(diffs: &[f64], ratio: f64) -> f64 {
    let n = diffs.len() as f64;
    let mean = compensated_sum(diffs.iter().copied()) / n;
    let var = compensated_sum(diffs.iter().map(|d| (d - mean) * (d - mean))) / (n - 1.0);
    mean / ((1.0 / n + ratio) * var).sqrt()
}

/// Gamma at `m / 2` for a positive integer `m`.
fn gamma_half(m: u32) -> f64 {
    let (mut z, mut g) = if m.is_multiple_of(2) { (1.0, 1.0) } else { (0.5, std::f64::consts::PI.sqrt()) };
    while z < m as f64 / 2.0 {
        g *= z;
        z += 1.0;
    }
    g
}

pub fn t_pdf(x: f64, df: u32) -> f64 {
    let v = df as f64;
    let c = gamma_half(df + 1) / ((v * std::f64::consts::PI).sqrt() * gamma_half(df));
    c * (1.0 + x * x / v).powf(-(v + 1.0) / 2.0)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let inner = compensated_sum((1..panels).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }));
    (f(a) + f(b) + inner) * h / 3.0
}

/// Two-sided tail `P(|T| >= |t|)` by Simpson quadrature of the density. Past
/// `|t| = 1` the tail is mapped onto `(0, 1]` with `x = |t| / u`.
pub fn t_two_sided_quadrature(t: f64, df: u32) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        1.0 - 2.0 * simpson(|x| t_pdf(x, df), 0.0, t, 20_000)
    } else {
        // the integrand tends to 1 / (pi t) at u = 0 when df = 1 and to 0 otherwise
        let at_zero = if df == 1 { 1.0 / (std::f64::consts::PI * t) } else { 0.0 };
        let tail = simpson(|u| if u == 0.0 { at_zero } else { t_pdf(t / u, df) * t / (u * u) }, 0.0, 1.0, 20_000);
        2.0 * tail
    }
}
