//! Special functions: integer-order Bessel functions of the first kind, the
//! standard normal density and distribution function, and grid scans of the
//! two Bessel inequalities that control the plane-wave regression weights.

use crate::error::{Error, Result};

/// Highest Bessel order accepted by [`bessel_j`].
pub const DEFAULT_MAX_BESSEL_ORDER: usize = 256;

/// Below this argument the power series is summed directly; its largest
/// term stays under ~5e3, so cancellation costs at most ~1e-12 absolute.
const SERIES_CUTOFF: f64 = 12.0;

const RESCALE_LIMIT: f64 = 1e250;

/// `J_n(x)` for integer `n >= 0` and finite `x >= 0`.
pub fn bessel_j(order: usize, x: f64) -> Result<f64> {
    bessel_j_with_max(order, x, DEFAULT_MAX_BESSEL_ORDER)
}

pub fn bessel_j_with_max(order: usize, x: f64, max_order: usize) -> Result<f64> {
    if order > max_order {
        return Err(Error::UnsupportedOrder {
            order,
            max: max_order,
        });
    }
    if !x.is_finite() || x < 0.0 {
        return Err(Error::Domain(format!(
            "Bessel argument must be finite and non-negative, got {x}"
        )));
    }
    if x < SERIES_CUTOFF {
        Ok(bessel_series(order, x))
    } else {
        let mut out = vec![0.0; order + 1];
        bessel_j_all(x, &mut out);
        Ok(out[order])
    }
}

/// Power series `sum_m (-1)^m (x/2)^(2m+n) / (m! (m+n)!)`.
fn bessel_series(order: usize, x: f64) -> f64 {
    let half = 0.5 * x;
    let mut term = 1.0;
    for k in 1..=order {
        term *= half / k as f64;
    }
    if term == 0.0 {
        return 0.0;
    }
    let q = half * half;
    let mut sum = term;
    let mut m = 0usize;
    loop {
        m += 1;
        term *= -q / (m as f64 * (m + order) as f64);
        sum += term;
        if term.abs() <= 1e-17 * sum.abs().max(1e-300) && m > 2 {
            break;
        }
        if m > 500 {
            break;
        }
    }
    sum
}

/// Fills `out[k] = J_k(x)` for `k = 0..out.len()` by Miller's backward
/// recurrence, normalised with `J_0 + 2 sum_k J_2k = 1`.
pub fn bessel_j_all(x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    if x == 0.0 {
        out.fill(0.0);
        out[0] = 1.0;
        return;
    }
    let nmax = out.len() - 1;
    let top = (nmax as f64).max(x.ceil());
    let mut start = (top + 30.0 + 6.0 * x.cbrt()).ceil() as usize;
    if start % 2 == 1 {
        start += 1;
    }
    let two_over_x = 2.0 / x;
    let mut above = 0.0; // J_{k+1}
    let mut cur = 1e-30; // J_k
    let mut norm = 0.0;
    out.fill(0.0);
    let mut k = start;
    loop {
        if k <= nmax {
            out[k] = cur;
        }
        if k % 2 == 0 {
            norm += if k == 0 { cur } else { 2.0 * cur };
        }
        if k == 0 {
            break;
        }
        let below = (k as f64) * two_over_x * cur - above;
        above = cur;
        cur = below;
        k -= 1;
        if cur.abs() > RESCALE_LIMIT {
            let s = 1.0 / RESCALE_LIMIT;
            cur *= s;
            above *= s;
            norm *= s;
            for v in out.iter_mut().skip(k + 1) {
                *v *= s;
            }
        }
    }
    let inv = 1.0 / norm;
    for v in out.iter_mut() {
        *v *= inv;
    }
}

pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal distribution function. Series on `|x| <= 6`, Mills-ratio
/// continued fraction in the tails.
pub fn norm_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x.abs() <= 6.0 {
        // Phi(x) = 1/2 + phi(x) * sum x^(2n+1) / (2n+1)!!
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        let mut n = 0usize;
        loop {
            n += 1;
            term *= x2 / (2 * n + 1) as f64;
            sum += term;
            if term.abs() < 1e-17 * sum.abs() || n > 400 {
                break;
            }
        }
        0.5 + norm_pdf(x) * sum
    } else {
        let tail = norm_pdf(x) * mills_ratio(x.abs());
        if x > 0.0 {
            1.0 - tail
        } else {
            tail
        }
    }
}

/// `(1 - Phi(x)) / phi(x)` for `x > 0`, modified Lentz evaluation of
/// `1 / (x + 1/(x + 2/(x + 3/(x + ...))))`.
fn mills_ratio(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / f
}

/// Density and distribution function of the standard normal at `x`.
pub fn gaussian_pdf_cdf(x: f64) -> Result<(f64, f64)> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("normal pdf/cdf needs a finite argument, got {x}")));
    }
    Ok((norm_pdf(x), norm_cdf(x)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BesselInequality {
    /// `1 - J0(s) - 2 J2(s) >= 0`
    Minus,
    /// `1 - J0(s) + 2 J2(s) >= 0`
    Plus,
}

impl BesselInequality {
    pub fn name(self) -> &'static str {
        match self {
            BesselInequality::Minus => "1-J0-2J2",
            BesselInequality::Plus => "1-J0+2J2",
        }
    }

    pub fn eval(self, s: f64) -> f64 {
        let mut j = [0.0; 3];
        if s < SERIES_CUTOFF {
            j[0] = bessel_series(0, s);
            j[2] = bessel_series(2, s);
        } else {
            bessel_j_all(s, &mut j);
        }
        match self {
            BesselInequality::Minus => 1.0 - j[0] - 2.0 * j[2],
            BesselInequality::Plus => 1.0 - j[0] + 2.0 * j[2],
        }
    }
}

pub const INEQUALITY_PASS_BOUND: f64 = -1e-12;

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct InequalityReport {
    pub name: String,
    pub grid_min: f64,
    pub grid_argmin: f64,
    pub passed: bool,
}

/// Scans the inequality on `{0, step, 2 step, ..., s_max}`.
pub fn verify_bessel_inequality(
    which: BesselInequality,
    s_max: f64,
    step: f64,
) -> Result<InequalityReport> {
    if !(step > 0.0 && step <= 0.05) {
        return Err(Error::invalid(format!("step must lie in (0, 0.05], got {step}")));
    }
    if !(s_max >= 20.0) || !s_max.is_finite() {
        return Err(Error::invalid(format!("s_max must be >= 20, got {s_max}")));
    }
    let n = (s_max / step + 1e-9).floor() as usize;
    Ok(scan_bessel_inequality(which, (0..=n).map(|i| i as f64 * step)))
}

/// Scans the inequality over an arbitrary set of arguments.
pub fn scan_bessel_inequality(
    which: BesselInequality,
    grid: impl IntoIterator<Item = f64>,
) -> InequalityReport {
    let mut grid_min = f64::INFINITY;
    let mut grid_argmin = f64::NAN;
    for s in grid {
        let v = which.eval(s);
        if v < grid_min {
            grid_min = v;
            grid_argmin = s;
        }
    }
    InequalityReport {
        name: which.name().to_string(),
        grid_min,
        grid_argmin,
        passed: grid_min >= INEQUALITY_PASS_BOUND,
    }
}

/// `{5 + 4i/100 : i = 0..=100}`, the grid on which `1 - J0 + 2 J2 > 0.08`
/// certifies the plus inequality on `[5, 9]`.
pub fn plus_certificate_grid() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| 5.0 + 4.0 * i as f64 / 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `J_n(x) = (1/2pi) int_0^2pi cos(n t - x sin t) dt`; the trapezoid rule
    /// is spectrally accurate for this periodic integrand.
    fn bessel_trapezoid(n: usize, x: f64) -> f64 {
        let m = 512;
        let h = std::f64::consts::TAU / m as f64;
        (0..m)
            .map(|k| {
                let t = k as f64 * h;
                (n as f64 * t - x * t.sin()).cos()
            })
            .sum::<f64>()
            / m as f64
    }

    #[test]
    fn bessel_trivial_values() {
        assert_eq!(bessel_j(0, 0.0).unwrap(), 1.0);
        assert_eq!(bessel_j(2, 0.0).unwrap(), 0.0);
        assert!(bessel_j(0, 2.404825557695773).unwrap().abs() < 1e-10);
    }

    #[test]
    fn bessel_matches_trapezoid_oracle() {
        let mut worst: f64 = 0.0;
        for n in 0..=64 {
            for i in 0..=200 {
                let x = 50.0 * i as f64 / 200.0;
                let d = (bessel_j(n, x).unwrap() - bessel_trapezoid(n, x)).abs();
                worst = worst.max(d);
            }
        }
        assert!(worst <= 1e-12, "worst deviation {worst:e}");
    }

    #[test]
    fn bessel_all_orders_agree_with_single() {
        let mut all = vec![0.0; 41];
        for &x in &[0.3, 5.0, 12.5, 33.0, 49.9] {
            bessel_j_all(x, &mut all);
            for (n, v) in all.iter().enumerate() {
                assert!((v - bessel_trapezoid(n, x)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn bessel_identity_two_j1_over_s() {
        let s = 1.7;
        let r = 2.0 * bessel_j(1, s).unwrap() / s - bessel_j(0, s).unwrap() - bessel_j(2, s).unwrap();
        assert!(r.abs() < 1e-12);
    }

    #[test]
    fn bessel_recurrence_residual_and_bound() {
        for n in 1..=30 {
            for i in 0..=395 {
                let x = 0.5 + 0.1 * i as f64;
                let a = bessel_j(n - 1, x).unwrap();
                let b = bessel_j(n, x).unwrap();
                let c = bessel_j(n + 1, x).unwrap();
                assert!((a + c - 2.0 * n as f64 / x * b).abs() <= 1e-10);
                assert!(b.abs() <= 1.0);
            }
        }
    }

    #[test]
    fn bessel_errors() {
        assert!(matches!(bessel_j(257, 1.0), Err(Error::UnsupportedOrder { .. })));
        assert!(matches!(bessel_j(0, f64::NAN), Err(Error::Domain(_))));
        assert!(matches!(bessel_j(0, f64::INFINITY), Err(Error::Domain(_))));
        assert!(bessel_j(256, 300.0).unwrap().abs() <= 1.0);
    }

    /// `int_0^x phi` by composite Simpson, an oracle independent of the series.
    fn cdf_by_quadrature(x: f64) -> f64 {
        let n = 20_000;
        let h = x / n as f64;
        let mut s = norm_pdf(0.0) + norm_pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * norm_pdf(i as f64 * h);
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn normal_values() {
        let (p, c) = gaussian_pdf_cdf(0.0).unwrap();
        assert!((p - 0.3989422804014327).abs() < 1e-16);
        assert_eq!(c, 0.5);
        assert!((norm_cdf(-0.7) + norm_cdf(0.7) - 1.0).abs() < 1e-14);
        assert!((norm_cdf(1.959963985) - 0.975).abs() < 1e-8);
        for &x in &[0.3, 1.0, 2.5, 4.0, 5.9] {
            assert!((norm_cdf(x) - cdf_by_quadrature(x)).abs() < 1e-12);
        }
        // tails: continued fraction against scipy.stats.norm.sf
        assert!((norm_cdf(-7.0) / 1.279812543885835e-12 - 1.0).abs() < 1e-12);
        assert!((norm_cdf(-8.0) / 6.22096057427174e-16 - 1.0).abs() < 1e-12);
        assert!(gaussian_pdf_cdf(f64::NAN).is_err());
    }

    #[test]
    fn normal_cdf_monotone_and_pdf_normalised() {
        let mut prev = 0.0;
        let n = 16_000;
        let h = 16.0 / n as f64;
        let mut area = 0.0;
        for i in 0..=n {
            let x = -8.0 + i as f64 * h;
            let c = norm_cdf(x);
            assert!(c >= prev);
            prev = c;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            area += w * norm_pdf(x) * h;
        }
        assert!((area - 1.0).abs() < 1e-8);
    }

    #[test]
    fn inequality_scans() {
        let plus = scan_bessel_inequality(BesselInequality::Plus, plus_certificate_grid());
        assert!(plus.grid_min > 0.08, "{plus:?}");
        assert_eq!(BesselInequality::Minus.eval(0.0), 0.0);
        let minus = verify_bessel_inequality(BesselInequality::Minus, 20.0, 1e-3).unwrap();
        assert!(minus.grid_min >= -1e-12 && minus.passed);
        assert!(verify_bessel_inequality(BesselInequality::Minus, 10.0, 1e-3).is_err());
        assert!(verify_bessel_inequality(BesselInequality::Minus, 20.0, 0.1).is_err());
    }

    #[test]
    fn minus_inequality_derivative_is_j3() {
        // d/ds (1 - J0 - 2 J2) = J3, checked by central differences
        for &s in &[0.5, 1.5, 3.0, 7.0, 15.0] {
            let h = 1e-5;
            let d = (BesselInequality::Minus.eval(s + h) - BesselInequality::Minus.eval(s - h)) / (2.0 * h);
            assert!((d - bessel_j(3, s).unwrap()).abs() < 1e-8);
        }
    }

    proptest::proptest! {
        #[test]
        fn bessel_bounded_and_recurrent(n in 1usize..30, x in 0.5f64..40.0) {
            let (a, b, c) = (bessel_j(n - 1, x).unwrap(), bessel_j(n, x).unwrap(), bessel_j(n + 1, x).unwrap());
            proptest::prop_assert!(a.abs() <= 1.0 && b.abs() <= 1.0 && c.abs() <= 1.0);
            proptest::prop_assert!((a + c - 2.0 * n as f64 / x * b).abs() <= 1e-10);
        }

        #[test]
        fn cdf_is_monotone(x in -12.0f64..12.0, dx in 0.0f64..1.0) {
            proptest::prop_assert!(norm_cdf(x) <= norm_cdf(x + dx));
        }
    }
}
