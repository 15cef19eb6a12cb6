//! Level densities of maxima, minima and saddles of an isotropic field, the
//! mean Euler characteristic density `h`, tail quadrature, and the level
//! thresholds delimiting where the excursion-component density is monotone.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;

use serde::Serialize;

use crate::covariance::{IsotropicModel, Jet2Law, CHI_DEGENERATE_TOL};
use crate::error::{Error, Result};
use crate::specfun::{norm_cdf, norm_pdf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CritKind {
    Max,
    Min,
    Saddle,
}

/// Density in the level `x` of critical points of the given kind, per unit
/// area.
pub fn crit_density(law: &Jet2Law, kind: CritKind, x: f64) -> Result<f64> {
    match kind {
        CritKind::Max => max_density(law, x),
        CritKind::Min => max_density(law, -x),
        CritKind::Saddle => saddle_density(law, x),
    }
}

fn degenerate(law: &Jet2Law) -> Result<bool> {
    if law.chi >= SQRT_2 - CHI_DEGENERATE_TOL {
        if law.chi >= SQRT_2 && !law.degenerate_jet {
            return Err(Error::Degeneracy(format!(
                "chi = {} reaches sqrt(2) for a law not flagged as the random plane wave",
                law.chi
            )));
        }
        return Ok(true);
    }
    Ok(false)
}

fn max_density(law: &Jet2Law, x: f64) -> Result<f64> {
    let pre = 1.0 / (PI * law.xi2);
    if degenerate(law)? {
        if x < 0.0 {
            return Ok(0.0);
        }
        let body = (x * x - 1.0) * (-0.5 * x * x).exp() + (-1.5 * x * x).exp();
        return Ok(pre * (2.0 / PI).sqrt() * body);
    }
    let chi = law.chi;
    let a = 2.0 - chi * chi;
    let b = 3.0 - chi * chi;
    let t1 = chi * chi * (x * x - 1.0) * norm_pdf(x) * norm_cdf(chi * x / a.sqrt());
    let t2 = chi * x * a.sqrt() / (2.0 * PI) * (-x * x / a).exp();
    let t3 = SQRT_2 / (PI * b).sqrt() * (-3.0 * x * x / (2.0 * b)).exp() * norm_cdf(chi * x / (a * b).sqrt());
    Ok(pre * (t1 + t2 + t3))
}

fn saddle_density(law: &Jet2Law, x: f64) -> Result<f64> {
    let b = if degenerate(law)? { 1.0 } else { 3.0 - law.chi * law.chi };
    Ok(1.0 / (PI * law.xi2) * SQRT_2 / (PI * b).sqrt() * (-3.0 * x * x / (2.0 * b)).exp())
}

/// Mean Euler characteristic per unit area of `{f >= level}`.
pub fn euler_density_h(model: &IsotropicModel, level: f64) -> f64 {
    -2.0 * model.k1(0.0) * level * (2.0 * PI).powf(-1.5) * (-0.5 * level * level).exp()
}

/// Length of the integration window `[level, level + TAIL_SPAN]`.
pub const TAIL_SPAN: f64 = 12.0;
const TAIL_REL_TOL: f64 = 1e-9;
const MAX_SUBDIVISIONS: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TailIntegral {
    pub value: f64,
    /// Estimate of the mass beyond the window, from the density at its end
    /// and Gaussian-type decay.
    pub truncation_bound: f64,
    pub subdivisions: usize,
}

/// `int_level^inf density`, truncated to `[level, level + 12]`.
pub fn tail_integral(density: impl Fn(f64) -> f64, level: f64) -> Result<TailIntegral> {
    if !level.is_finite() {
        return Err(Error::Domain(format!("level must be finite, got {level}")));
    }
    let (a, b) = (level, level + TAIL_SPAN);
    let (value, subdivisions) = adaptive_simpson(&density, a, b, TAIL_REL_TOL)?;
    let fb = density(b).abs();
    let truncation_bound = fb * if b > 2.0 { 2.0 / b } else { TAIL_SPAN };
    Ok(TailIntegral {
        value,
        truncation_bound,
        subdivisions,
    })
}

/// Adaptive Simpson with tolerance split in proportion to panel width,
/// starting from 64 panels so narrow features are not missed.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> Result<(f64, usize)> {
    const START: usize = 64;
    let w = (b - a) / START as f64;
    let mut stack = Vec::with_capacity(128);
    let mut scale = 0.0;
    for i in 0..START {
        let lo = a + i as f64 * w;
        let hi = if i + 1 == START { b } else { lo + w };
        let (fl, fm, fh) = (f(lo), f(0.5 * (lo + hi)), f(hi));
        let s = (hi - lo) / 6.0 * (fl + 4.0 * fm + fh);
        scale += (hi - lo) / 6.0 * (fl.abs() + 4.0 * fm.abs() + fh.abs());
        stack.push((lo, hi, fl, fm, fh, s));
    }
    if !scale.is_finite() {
        return Err(Error::Quadrature("integrand is not finite on the window".into()));
    }
    let tol = (rel_tol * scale).max(f64::MIN_POSITIVE);
    let len = b - a;
    let mut total = 0.0;
    let mut comp = 0.0;
    let mut subdivisions = START;
    while let Some((lo, hi, fl, fm, fh, whole)) = stack.pop() {
        let mid = 0.5 * (lo + hi);
        let (flm, fmh) = (f(0.5 * (lo + mid)), f(0.5 * (mid + hi)));
        let left = (mid - lo) / 6.0 * (fl + 4.0 * flm + fm);
        let right = (hi - mid) / 6.0 * (fm + 4.0 * fmh + fh);
        let err = left + right - whole;
        let local = tol * (hi - lo) / len;
        if err.abs() <= 15.0 * local || hi - lo <= len * f64::EPSILON {
            // Kahan summation of the Richardson-corrected panel value
            let y = left + right + err / 15.0 - comp;
            let t = total + y;
            comp = (t - total) - y;
            total = t;
        } else {
            subdivisions += 1;
            if subdivisions > MAX_SUBDIVISIONS {
                return Err(Error::Quadrature(format!(
                    "no convergence within {MAX_SUBDIVISIONS} subdivisions on [{a}, {b}]"
                )));
            }
            stack.push((lo, mid, fl, flm, fm, left));
            stack.push((mid, hi, fm, fmh, fh, right));
        }
    }
    Ok((total, subdivisions))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Thresholds {
    /// Largest `C` with `p_s/2 - p_{m+} > 0` on `[0, C]`.
    pub lower_positive_bound: f64,
    /// Smallest `L` with `p_s - p_{m+} < 0` on `[L, SCAN_MAX]`.
    pub upper_negative_bound: f64,
    /// `sqrt(2)/chi`
    pub crude_upper_bound: f64,
}

const SCAN_STEP: f64 = 1e-3;
/// Upper end of the threshold scan; all densities are below `1e-30` beyond it.
pub const SCAN_MAX: f64 = 12.0;
const BISECT_TOL: f64 = 1e-6;

pub fn monotone_thresholds(law: &Jet2Law) -> Result<Thresholds> {
    let ps = |x: f64| saddle_density(law, x);
    let pm = |x: f64| max_density(law, x);
    let lower_gap = |x: f64| -> Result<f64> { Ok(ps(x)? / 2.0 - pm(x)?) };
    let upper_gap = |x: f64| -> Result<f64> { Ok(ps(x)? - pm(x)?) };
    let n = (SCAN_MAX / SCAN_STEP).round() as usize;
    let grid = |i: usize| i as f64 * SCAN_STEP;

    let lower_fails = |x: f64| -> Result<bool> { Ok(lower_gap(x)? <= 0.0) };
    let upper_holds = |x: f64| -> Result<bool> { Ok(upper_gap(x)? < 0.0) };

    let mut lower = SCAN_MAX;
    if lower_fails(0.0)? {
        lower = 0.0;
    } else {
        for i in 1..=n {
            if lower_fails(grid(i))? {
                lower = bisect(&lower_fails, grid(i - 1), grid(i))?;
                break;
            }
        }
    }

    let mut upper = 0.0;
    for i in (0..=n).rev() {
        if !upper_holds(grid(i))? {
            upper = if i == n { SCAN_MAX } else { bisect(&upper_holds, grid(i), grid(i + 1))? };
            break;
        }
    }

    Ok(Thresholds {
        lower_positive_bound: lower,
        upper_negative_bound: upper,
        crude_upper_bound: SQRT_2 / law.chi,
    })
}

/// Switch point of `pred` in `[a, b]`, given `pred(a)` false and `pred(b)` true.
fn bisect(pred: &dyn Fn(f64) -> Result<bool>, mut a: f64, mut b: f64) -> Result<f64> {
    while b - a > BISECT_TOL {
        let m = 0.5 * (a + b);
        if pred(m)? {
            b = m;
        } else {
            a = m;
        }
    }
    Ok(0.5 * (a + b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DensityRow {
    pub level: f64,
    pub p_m_plus: f64,
    pub p_m_minus: f64,
    pub p_s: f64,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityCurve {
    pub rows: Vec<DensityRow>,
    /// Monte Carlo estimates of the lower-connected saddle density per level,
    /// as `(value, std_error)`, when available.
    pub p_s_minus: Option<Vec<(f64, f64)>>,
}

pub fn density_curve(model: &IsotropicModel, law: &Jet2Law, levels: &[f64]) -> Result<DensityCurve> {
    if levels.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("levels must be strictly ascending"));
    }
    let rows = levels
        .iter()
        .map(|&x| {
            Ok(DensityRow {
                level: x,
                p_m_plus: crit_density(law, CritKind::Max, x)?,
                p_m_minus: crit_density(law, CritKind::Min, x)?,
                p_s: crit_density(law, CritKind::Saddle, x)?,
                h: euler_density_h(model, x),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityCurve { rows, p_s_minus: None })
}

pub fn write_density_csv<W: Write>(mut w: W, curve: &DensityCurve) -> Result<()> {
    writeln!(w, "level,p_m_plus,p_m_minus,p_s,h")?;
    for r in &curve.rows {
        writeln!(w, "{},{:e},{:e},{:e},{:e}", r.level, r.p_m_plus, r.p_m_minus, r.p_s, r.h)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{jet2_law, jet_covariance, VALUE_HESSIAN};

    fn bf() -> (IsotropicModel, Jet2Law) {
        let m = IsotropicModel::bargmann_fock();
        let l = jet2_law(&m).unwrap();
        (m, l)
    }

    fn rpw() -> (IsotropicModel, Jet2Law) {
        let m = IsotropicModel::random_plane_wave();
        let l = jet2_law(&m).unwrap();
        (m, l)
    }

    /// Kac-Rice by direct 3-D quadrature: `phi(x) p_grad(0) E[|det H| 1_kind | f = x]`
    /// with `H = (f11, f22, f12)` conditioned on `f(0) = x`, integrated by
    /// the midpoint rule in whitened coordinates.
    fn kac_rice_oracle(model: &IsotropicModel, kind: CritKind, x: f64) -> f64 {
        let s = jet_covariance(model, &VALUE_HESSIAN);
        let mean: Vec<f64> = (1..4).map(|i| s[(i, 0)] * x).collect();
        let cov = nalgebra::Matrix3::from_fn(|i, j| s[(i + 1, j + 1)] - s[(i + 1, 0)] * s[(0, j + 1)]);
        let l = cov.cholesky().unwrap().l();
        let n = 160usize;
        let span = 7.0;
        let step = 2.0 * span / n as f64;
        let g: Vec<f64> = (0..n).map(|i| -span + (i as f64 + 0.5) * step).collect();
        let w: Vec<f64> = g.iter().map(|&z| norm_pdf(z) * step).collect();
        let mut acc = 0.0;
        for (a, &za) in g.iter().enumerate() {
            for (b, &zb) in g.iter().enumerate() {
                for (c, &zc) in g.iter().enumerate() {
                    let h11 = mean[0] + l[(0, 0)] * za;
                    let h22 = mean[1] + l[(1, 0)] * za + l[(1, 1)] * zb;
                    let h12 = mean[2] + l[(2, 0)] * za + l[(2, 1)] * zb + l[(2, 2)] * zc;
                    let det = h11 * h22 - h12 * h12;
                    let hit = match kind {
                        CritKind::Saddle => det < 0.0,
                        CritKind::Max => det > 0.0 && h11 < 0.0,
                        CritKind::Min => det > 0.0 && h11 > 0.0,
                    };
                    if hit {
                        acc += det.abs() * w[a] * w[b] * w[c];
                    }
                }
            }
        }
        let grad_var = -2.0 * model.k1(0.0);
        norm_pdf(x) * acc / (2.0 * PI * grad_var)
    }

    #[test]
    fn formulas_match_kac_rice_quadrature() {
        let mix = IsotropicModel::gaussian_mixture("mix", vec![(0.5, 0.7), (0.5, 1.4)]).unwrap();
        for m in [IsotropicModel::bargmann_fock(), mix] {
            let law = jet2_law(&m).unwrap();
            for &x in &[-1.0, 0.0, 0.7, 1.5] {
                for kind in [CritKind::Max, CritKind::Min, CritKind::Saddle] {
                    let got = crit_density(&law, kind, x).unwrap();
                    let oracle = kac_rice_oracle(&m, kind, x);
                    assert!(
                        (got - oracle).abs() <= 2e-3 * oracle.abs().max(1e-3),
                        "{} {kind:?} {x}: {got} vs {oracle}",
                        m.name()
                    );
                }
            }
        }
    }

    #[test]
    fn rpw_values() {
        let (_, law) = rpw();
        let c = 1.0 / (4.0 * SQRT_2 * PI.powf(1.5));
        assert!((crit_density(&law, CritKind::Saddle, 0.0).unwrap() - c).abs() < 1e-12);
        assert!((c - 0.031746817967).abs() < 1e-11);
        assert_eq!(crit_density(&law, CritKind::Max, -0.5).unwrap(), 0.0);
        assert!((crit_density(&law, CritKind::Max, 0.5).unwrap() - 8.068962323549107e-4).abs() < 1e-15);
    }

    #[test]
    fn generic_formula_approaches_rpw_limit() {
        let (_, law) = rpw();
        let near = Jet2Law::from_chi_xi2(SQRT_2 - 1e-6, 8.0).unwrap();
        assert!(!near.is_degenerate());
        // p_s depends on chi only through b = 3 - chi^2, so the gap is
        // p_s(x) * (b^{-1/2} e^{3x^2/2 (1 - 1/b)} - 1) exactly.
        let b = 3.0 - near.chi * near.chi;
        for &x in &[-1.0, 0.5, 2.0] {
            let ps = crit_density(&law, CritKind::Saddle, x).unwrap();
            let ds = crit_density(&near, CritKind::Saddle, x).unwrap() - ps;
            let predicted = ps * (b.powf(-0.5) * (1.5 * x * x * (1.0 - 1.0 / b)).exp() - 1.0);
            assert!((ds - predicted).abs() < 1e-14, "{x}: {ds} vs {predicted}");
            assert!(ds.abs() < 2.1e-8);
            let dm = crit_density(&near, CritKind::Max, x).unwrap() - crit_density(&law, CritKind::Max, x).unwrap();
            assert!(dm.abs() < 1e-4, "{x}: {dm}");
        }
    }

    #[test]
    fn chi_sqrt2_without_flag_is_rejected() {
        let law = Jet2Law::from_chi_xi2(SQRT_2, 8.0).unwrap();
        if law.chi >= SQRT_2 {
            assert!(matches!(crit_density(&law, CritKind::Saddle, 0.0), Err(Error::Degeneracy(_))));
        }
        let law = Jet2Law::from_chi_xi2(SQRT_2 - 1e-10, 8.0).unwrap();
        assert!(crit_density(&law, CritKind::Saddle, 0.0).is_ok());
    }

    #[test]
    fn symmetry_and_positivity() {
        for (_, law) in [bf(), rpw()] {
            for i in -6000..=6000 {
                let x = i as f64 * 1e-3;
                let pm = crit_density(&law, CritKind::Max, x).unwrap();
                let pn = crit_density(&law, CritKind::Min, -x).unwrap();
                let ps = crit_density(&law, CritKind::Saddle, x).unwrap();
                assert_eq!(pm, pn);
                assert!(pm >= 0.0 && ps > 0.0, "{x}");
                assert!((ps - crit_density(&law, CritKind::Saddle, -x).unwrap()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn euler_h() {
        let (m, law) = bf();
        assert_eq!(euler_density_h(&m, 0.0), 0.0);
        // Hessian of K at 0 by central differences gives det = 1 for BF
        let d = 1e-4;
        let k = |x: f64, y: f64| (-(x * x + y * y) / 2.0).exp();
        let kxx = (k(d, 0.0) - 2.0 * k(0.0, 0.0) + k(-d, 0.0)) / (d * d);
        let kyy = (k(0.0, d) - 2.0 * k(0.0, 0.0) + k(0.0, -d)) / (d * d);
        let kxy = (k(d, d) - k(d, -d) - k(-d, d) + k(-d, -d)) / (4.0 * d * d);
        let det = kxx * kyy - kxy * kxy;
        let oracle = det.sqrt() * (2.0 * PI).powf(-1.5) * (-0.5f64).exp();
        assert!((euler_density_h(&m, 1.0) - oracle).abs() < 1e-8);
        assert!((euler_density_h(&m, 1.0) - 0.0385108369).abs() < 1e-9);
        assert_eq!(law.euler_h(1.3), euler_density_h(&m, 1.3));
    }

    #[test]
    fn euler_identity_by_quadrature() {
        for (m, law) in [bf(), rpw()] {
            for &l in &[-2.0, -1.0, 0.0, 1.0, 2.0] {
                let f = |x: f64| {
                    crit_density(&law, CritKind::Max, x).unwrap() + crit_density(&law, CritKind::Min, x).unwrap()
                        - crit_density(&law, CritKind::Saddle, x).unwrap()
                };
                let t = tail_integral(f, l).unwrap();
                assert!((t.value - euler_density_h(&m, l)).abs() < 1e-6, "{} {l}", m.name());
                assert!(t.truncation_bound < 1e-12);
            }
        }
    }

    #[test]
    fn tail_integral_properties() {
        let (_, law) = rpw();
        let ps = |x: f64| crit_density(&law, CritKind::Saddle, x).unwrap();
        let pm = |x: f64| crit_density(&law, CritKind::Max, x).unwrap();
        assert!(tail_integral(ps, 10.0).unwrap().value < 1e-12);
        let c = 1.0 / (4.0 * SQRT_2 * PI.powf(1.5));
        let exact = c * (PI / 6.0).sqrt();
        let got = tail_integral(ps, 0.0).unwrap().value;
        assert!((got - exact).abs() < 1e-9 * exact);
        let diff = tail_integral(|x| pm(x) - ps(x), 0.3).unwrap().value;
        let sep = tail_integral(pm, 0.3).unwrap().value - tail_integral(ps, 0.3).unwrap().value;
        assert!((diff - sep).abs() < 1e-12);
        assert!(tail_integral(ps, f64::NAN).is_err());
        assert!(matches!(tail_integral(|_| f64::INFINITY, 0.0), Err(Error::Quadrature(_))));
    }

    #[test]
    fn thresholds() {
        let (_, law) = bf();
        let t = monotone_thresholds(&law).unwrap();
        assert!((t.lower_positive_bound - 0.6445).abs() < 1e-3, "{t:?}");
        assert!(t.upper_negative_bound <= 1.03 && t.upper_negative_bound > 1.0, "{t:?}");
        assert!((t.crude_upper_bound - SQRT_2).abs() < 1e-12);
        let (_, law) = rpw();
        let t = monotone_thresholds(&law).unwrap();
        assert!((t.lower_positive_bound - 0.8764).abs() < 1e-3, "{t:?}");
        assert!((t.upper_negative_bound - 1.0).abs() < 1e-5, "{t:?}");
    }

    #[test]
    fn csv_table() {
        let (m, law) = rpw();
        let levels: Vec<f64> = (-3..=3).map(|i| i as f64).collect();
        let curve = density_curve(&m, &law, &levels).unwrap();
        let mut out = Vec::new();
        write_density_csv(&mut out, &curve).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("level,p_m_plus,p_m_minus,p_s,h"));
        let zero: Vec<f64> = text.lines().nth(4).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(zero[0], 0.0);
        assert!((zero[3] - 0.031746817967).abs() < 1e-11);
        assert!(density_curve(&m, &law, &[1.0, 0.0]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn density_symmetries(chi in 0.05f64..1.41, xi2 in 0.1f64..20.0, x in -6.0f64..6.0) {
            let law = Jet2Law::from_chi_xi2(chi, xi2).unwrap();
            let ps = crit_density(&law, CritKind::Saddle, x).unwrap();
            proptest::prop_assert!(ps > 0.0);
            proptest::prop_assert!((ps - crit_density(&law, CritKind::Saddle, -x).unwrap()).abs() <= 1e-14);
            let max = crit_density(&law, CritKind::Max, -x).unwrap();
            proptest::prop_assert_eq!(crit_density(&law, CritKind::Min, x).unwrap(), max);
            proptest::prop_assert!(max >= 0.0);
        }
    }
}
