//! Covariance kernels, the law of the second jet at the origin, the Gaussian
//! regression weights `alpha`, `beta`, `gamma` used to condition on a saddle,
//! and numeric checks of the monotonicity and non-degeneracy assumptions.
//!
//! Conventions: a jet component is identified by the multi-index of the
//! partial derivative it takes (`[]` is the value, `[0]` is `d/dx1`,
//! `[0, 1]` is `d^2/dx1 dx2`), and for a stationary field
//! `Cov(d^a f(s), d^b f(t)) = (-1)^|b| d^(a+b) K(s - t)`.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};

use nalgebra::{DMatrix, DVector, Matrix4, Matrix6};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::specfun::bessel_j_all;

/// A stationary covariance `K` on the plane with partial derivatives up to
/// order four.
pub trait CovarianceKernel: Send + Sync {
    /// `d^idx K(x)`; `idx` holds coordinate indices in `{0, 1}`, at most four.
    fn partial(&self, x: [f64; 2], idx: &[usize]) -> f64;

    fn value(&self, x: [f64; 2]) -> f64 {
        self.partial(x, &[])
    }
}

/// Multi-indices of the full second jet `(f, f1, f2, f11, f22, f12)`.
pub const JET: [&[usize]; 6] = [&[], &[0], &[1], &[0, 0], &[1, 1], &[0, 1]];
/// Multi-indices of `(f, f11, f22, f12)`.
pub const VALUE_HESSIAN: [&[usize]; 4] = [&[], &[0, 0], &[1, 1], &[0, 1]];

/// `Cov(d^a f(s), d^b f(t))`.
pub fn cross_cov(kernel: &dyn CovarianceKernel, s: [f64; 2], a: &[usize], t: [f64; 2], b: &[usize]) -> f64 {
    let mut idx = [0usize; 8];
    idx[..a.len()].copy_from_slice(a);
    idx[a.len()..a.len() + b.len()].copy_from_slice(b);
    let sign = if b.len() % 2 == 0 { 1.0 } else { -1.0 };
    sign * kernel.partial([s[0] - t[0], s[1] - t[1]], &idx[..a.len() + b.len()])
}

/// Covariance matrix of the listed jet components, all taken at one point.
pub fn jet_covariance(kernel: &dyn CovarianceKernel, comps: &[&[usize]]) -> DMatrix<f64> {
    let n = comps.len();
    DMatrix::from_fn(n, n, |i, j| cross_cov(kernel, [0.0; 2], comps[i], [0.0; 2], comps[j]))
}

/// `K(x) = cos(w . x)`: all spectral mass on the two points `+-w`.
#[derive(Clone, Copy, Debug)]
pub struct CosineKernel {
    pub frequency: [f64; 2],
}

impl CovarianceKernel for CosineKernel {
    fn partial(&self, x: [f64; 2], idx: &[usize]) -> f64 {
        let w = self.frequency;
        let u = w[0] * x[0] + w[1] * x[1];
        let scale: f64 = idx.iter().map(|&i| w[i]).product();
        scale * (u + idx.len() as f64 * FRAC_PI_2).cos()
    }
}

/// Radial profile of an isotropic kernel, `K(x) = k(|x|^2)`.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelForm {
    /// `k(y) = exp(-y/2)`
    BargmannFock,
    /// `k(y) = J0(sqrt(y))`
    RandomPlaneWave,
    /// `k(y) = sum_n c_n y^n`
    PowerSeries(Vec<f64>),
    /// Spectral measure `sum_j w_j N(0, s_j^2 I)`, i.e.
    /// `k(y) = sum_j w_j exp(-s_j^2 y / 2)`; entries are `(w_j, s_j)`.
    GaussianMixture(Vec<(f64, f64)>),
}

/// Spectral measure from which frequency vectors are drawn.
#[derive(Clone, Debug, PartialEq)]
pub enum SpectralMeasure {
    UnitCircle,
    GaussianMixture(Vec<(f64, f64)>),
}

impl SpectralMeasure {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        match self {
            SpectralMeasure::UnitCircle => {
                let a = rng.random::<f64>() * 2.0 * PI;
                [a.cos(), a.sin()]
            }
            SpectralMeasure::GaussianMixture(comps) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut scale = comps.last().map(|c| c.1).unwrap_or(1.0);
                for &(w, s) in comps {
                    acc += w;
                    if u < acc {
                        scale = s;
                        break;
                    }
                }
                let a: f64 = StandardNormal.sample(rng);
                let b: f64 = StandardNormal.sample(rng);
                [scale * a, scale * b]
            }
        }
    }

    /// Lebesgue density `S` with `K(x) = int S(w) e^{i w.x} dw`, if it exists.
    pub fn density(&self, w: [f64; 2]) -> Option<f64> {
        match self {
            SpectralMeasure::UnitCircle => None,
            SpectralMeasure::GaussianMixture(comps) => {
                let r2 = w[0] * w[0] + w[1] * w[1];
                Some(
                    comps
                        .iter()
                        .map(|&(wt, s)| wt / (2.0 * PI * s * s) * (-r2 / (2.0 * s * s)).exp())
                        .sum(),
                )
            }
        }
    }

    /// Smallest Gaussian scale, which sets how fast the kernel decays.
    pub fn min_scale(&self) -> Option<f64> {
        match self {
            SpectralMeasure::UnitCircle => None,
            SpectralMeasure::GaussianMixture(c) => c.iter().map(|x| x.1).reduce(f64::min),
        }
    }

    pub fn max_scale(&self) -> Option<f64> {
        match self {
            SpectralMeasure::UnitCircle => None,
            SpectralMeasure::GaussianMixture(c) => c.iter().map(|x| x.1).reduce(f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IsotropicModel {
    name: String,
    form: KernelForm,
}

/// Radius below which `J_n(r)/r^n` is summed as a power series.
const RPW_SERIES_RADIUS: f64 = 1.0;

impl IsotropicModel {
    pub fn bargmann_fock() -> Self {
        IsotropicModel {
            name: "bargmann-fock".into(),
            form: KernelForm::BargmannFock,
        }
    }

    pub fn random_plane_wave() -> Self {
        IsotropicModel {
            name: "rpw".into(),
            form: KernelForm::RandomPlaneWave,
        }
    }

    pub fn power_series(name: impl Into<String>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() < 3 {
            return Err(Error::invalid("power-series kernel needs at least c0, c1, c2"));
        }
        Self::validated(name.into(), KernelForm::PowerSeries(coeffs))
    }

    pub fn gaussian_mixture(name: impl Into<String>, comps: Vec<(f64, f64)>) -> Result<Self> {
        if comps.is_empty() || comps.iter().any(|&(w, s)| !(w > 0.0) || !(s > 0.0) || !w.is_finite() || !s.is_finite()) {
            return Err(Error::invalid("mixture components need positive finite weights and scales"));
        }
        let total: f64 = comps.iter().map(|c| c.0).sum();
        let comps = comps.into_iter().map(|(w, s)| (w / total, s)).collect();
        Self::validated(name.into(), KernelForm::GaussianMixture(comps))
    }

    fn validated(name: String, form: KernelForm) -> Result<Self> {
        let m = IsotropicModel { name, form };
        let [k0, k1, k2, ..] = m.k_derivs(0.0);
        if (k0 - 1.0).abs() > 1e-12 {
            return Err(Error::ModelInconsistency(format!("k(0) must be 1, got {k0}")));
        }
        if !(k1 < 0.0) || !(k2 > 0.0) {
            return Err(Error::ModelInconsistency(format!(
                "need k'(0) < 0 < k''(0), got k'(0) = {k1}, k''(0) = {k2}"
            )));
        }
        Ok(m)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn form(&self) -> &KernelForm {
        &self.form
    }

    pub fn is_rpw(&self) -> bool {
        self.form == KernelForm::RandomPlaneWave
    }

    /// True iff `(f(0), Hess f(0))` is degenerate (`f + f11 + f22 = 0`).
    pub fn degenerate_jet(&self) -> bool {
        self.is_rpw()
    }

    pub fn spectral_measure(&self) -> Option<SpectralMeasure> {
        match &self.form {
            KernelForm::BargmannFock => Some(SpectralMeasure::GaussianMixture(vec![(1.0, 1.0)])),
            KernelForm::RandomPlaneWave => Some(SpectralMeasure::UnitCircle),
            KernelForm::PowerSeries(_) => None,
            KernelForm::GaussianMixture(c) => Some(SpectralMeasure::GaussianMixture(c.clone())),
        }
    }

    /// `[k, k', k'', k''', k'''']` at `y >= 0`.
    pub fn k_derivs(&self, y: f64) -> [f64; 5] {
        match &self.form {
            KernelForm::BargmannFock => {
                let e = (-0.5 * y).exp();
                [e, -0.5 * e, 0.25 * e, -0.125 * e, 0.0625 * e]
            }
            KernelForm::GaussianMixture(comps) => {
                let mut out = [0.0; 5];
                for &(w, s) in comps {
                    let a = -0.5 * s * s;
                    let mut term = w * (a * y).exp();
                    for o in out.iter_mut() {
                        *o += term;
                        term *= a;
                    }
                }
                out
            }
            KernelForm::PowerSeries(c) => {
                let mut out = [0.0; 5];
                for (d, o) in out.iter_mut().enumerate() {
                    // sum_n c_n n!/(n-d)! y^(n-d), Horner from the top
                    let mut acc = 0.0;
                    for n in (d..c.len()).rev() {
                        let falling: f64 = ((n - d + 1)..=n).map(|v| v as f64).product();
                        acc = acc * y + c[n] * falling;
                    }
                    *o = acc;
                }
                out
            }
            KernelForm::RandomPlaneWave => rpw_k_derivs(y),
        }
    }

    pub fn k(&self, y: f64) -> f64 {
        self.k_derivs(y)[0]
    }
    pub fn k1(&self, y: f64) -> f64 {
        self.k_derivs(y)[1]
    }
    pub fn k2(&self, y: f64) -> f64 {
        self.k_derivs(y)[2]
    }
    pub fn k3(&self, y: f64) -> f64 {
        self.k_derivs(y)[3]
    }

    /// Correlation-length scale `1/sqrt(-2 k'(0))`, the standard deviation of
    /// a gradient component being its inverse.
    pub fn length_scale(&self) -> f64 {
        1.0 / (-2.0 * self.k1(0.0)).sqrt()
    }
}

/// `k^(n)(y) = (-1/2)^n J_n(r) / r^n` with `r = sqrt(y)`.
fn rpw_k_derivs(y: f64) -> [f64; 5] {
    let r = y.max(0.0).sqrt();
    let mut out = [0.0; 5];
    if r < RPW_SERIES_RADIUS {
        // J_n(r)/r^n = sum_m (-1)^m (r^2/4)^m / (2^n m! (m+n)!)
        let q = 0.25 * y;
        for (n, o) in out.iter_mut().enumerate() {
            let mut term = 1.0 / (2f64.powi(n as i32) * (1..=n).map(|v| v as f64).product::<f64>());
            let mut sum = term;
            for m in 1..40 {
                term *= -q / (m as f64 * (m + n) as f64);
                sum += term;
            }
            *o = (-0.5f64).powi(n as i32) * sum;
        }
    } else {
        let mut j = [0.0; 5];
        bessel_j_all(r, &mut j);
        let mut rn = 1.0;
        for (n, o) in out.iter_mut().enumerate() {
            *o = (-0.5f64).powi(n as i32) * j[n] / rn;
            rn *= r;
        }
    }
    out
}

impl CovarianceKernel for IsotropicModel {
    fn partial(&self, x: [f64; 2], idx: &[usize]) -> f64 {
        let y = x[0] * x[0] + x[1] * x[1];
        let k = self.k_derivs(y);
        let d = |i: usize, j: usize| if idx[i] == idx[j] { 1.0 } else { 0.0 };
        let p = |i: usize| x[idx[i]];
        match idx.len() {
            0 => k[0],
            1 => 2.0 * p(0) * k[1],
            2 => 2.0 * d(0, 1) * k[1] + 4.0 * p(0) * p(1) * k[2],
            3 => {
                4.0 * (d(0, 1) * p(2) + d(0, 2) * p(1) + d(1, 2) * p(0)) * k[2]
                    + 8.0 * p(0) * p(1) * p(2) * k[3]
            }
            4 => {
                4.0 * (d(0, 1) * d(2, 3) + d(0, 2) * d(1, 3) + d(0, 3) * d(1, 2)) * k[2]
                    + 8.0
                        * (d(0, 1) * p(2) * p(3)
                            + d(0, 2) * p(1) * p(3)
                            + d(0, 3) * p(1) * p(2)
                            + d(1, 2) * p(0) * p(3)
                            + d(1, 3) * p(0) * p(2)
                            + d(2, 3) * p(0) * p(1))
                        * k[3]
                    + 16.0 * p(0) * p(1) * p(2) * p(3) * k[4]
            }
            n => panic!("kernel derivatives of order {n} are not supported"),
        }
    }
}

/// Built-in models plus custom kernels declared in a config file.
#[derive(Clone, Debug, Default)]
pub struct ModelRegistry {
    custom: BTreeMap<String, IsotropicModel>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, model: IsotropicModel) {
        self.custom.insert(model.name().to_string(), model);
    }

    pub fn get(&self, name: &str) -> Result<IsotropicModel> {
        match name {
            "rpw" | "random-plane-wave" => Ok(IsotropicModel::random_plane_wave()),
            "bf" | "bargmann-fock" => Ok(IsotropicModel::bargmann_fock()),
            other => self
                .custom
                .get(other)
                .cloned()
                .ok_or_else(|| Error::Configuration(format!("unknown model '{other}'"))),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = vec!["rpw".to_string(), "bargmann-fock".to_string()];
        v.extend(self.custom.keys().cloned());
        v
    }
}

/// Law of the second jet of an isotropic field at the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet2Law {
    /// Covariance of `(f, f11, f22, f12)`.
    pub sigma0: Matrix4<f64>,
    /// Covariance of `(f, f1, f2, f11, f22, f12)`.
    pub sigma_full: Matrix6<f64>,
    pub chi: f64,
    pub xi2: f64,
    pub mu: f64,
    pub sigma2: f64,
    pub tau: f64,
    /// `k'(0)`
    pub k1: f64,
    /// `k''(0)`
    pub k2: f64,
    /// Set for the random plane wave, whose `(f, Hess f)` at 0 is degenerate.
    pub degenerate_jet: bool,
}

/// Tolerance within which `chi` counts as `sqrt(2)`.
pub const CHI_DEGENERATE_TOL: f64 = 1e-9;

impl Jet2Law {
    /// True when `chi` is `sqrt(2)` to within [`CHI_DEGENERATE_TOL`].
    pub fn is_degenerate(&self) -> bool {
        (SQRT_2 - self.chi).abs() <= CHI_DEGENERATE_TOL
    }

    /// Jet parameters from `k'(0) < 0 < k''(0)` alone.
    pub fn from_derivatives(k1: f64, k2: f64) -> Result<Self> {
        if !(k1 < 0.0) || !(k2 > 0.0) {
            return Err(Error::ModelInconsistency(format!(
                "need k'(0) < 0 < k''(0), got {k1}, {k2}"
            )));
        }
        let chi = -k1 / k2.sqrt();
        if chi > SQRT_2 + CHI_DEGENERATE_TOL {
            return Err(Error::ModelInconsistency(format!(
                "chi = {chi} exceeds sqrt(2); not a valid planar covariance"
            )));
        }
        let chi2 = (chi * chi).min(2.0);
        let mut sigma0 = Matrix4::zeros();
        sigma0[(0, 0)] = 1.0;
        for i in 1..=2 {
            sigma0[(0, i)] = 2.0 * k1;
            sigma0[(i, 0)] = 2.0 * k1;
            sigma0[(i, i)] = 12.0 * k2;
        }
        sigma0[(1, 2)] = 4.0 * k2;
        sigma0[(2, 1)] = 4.0 * k2;
        sigma0[(3, 3)] = 4.0 * k2;
        let mut sigma_full = Matrix6::zeros();
        let map = [0usize, 3, 4, 5];
        for (a, &i) in map.iter().enumerate() {
            for (b, &j) in map.iter().enumerate() {
                sigma_full[(i, j)] = sigma0[(a, b)];
            }
        }
        sigma_full[(1, 1)] = -2.0 * k1;
        sigma_full[(2, 2)] = -2.0 * k1;
        Ok(Jet2Law {
            sigma0,
            sigma_full,
            chi,
            xi2: -k1 / k2,
            mu: 2.0 * k1,
            sigma2: 16.0 * k2 * (2.0 - chi2) / (3.0 - chi2),
            tau: (chi2 - 1.0) / (3.0 - chi2),
            k1,
            k2,
            degenerate_jet: false,
        })
    }

    /// Law with prescribed `chi` and `xi^2`: `k'(0) = -chi^2/xi^2`,
    /// `k''(0) = chi^2/xi^4`.
    pub fn from_chi_xi2(chi: f64, xi2: f64) -> Result<Self> {
        if !(chi > 0.0) || !(xi2 > 0.0) {
            return Err(Error::invalid("chi and xi^2 must be positive"));
        }
        Self::from_derivatives(-chi * chi / xi2, chi * chi / (xi2 * xi2))
    }

    /// Mean Euler characteristic density of `{f >= level}`.
    pub fn euler_h(&self, level: f64) -> f64 {
        -2.0 * self.k1 * level * (2.0 * PI).powf(-1.5) * (-0.5 * level * level).exp()
    }
}

pub fn jet2_law(model: &IsotropicModel) -> Result<Jet2Law> {
    let [_, k1, k2, ..] = model.k_derivs(0.0);
    let mut law = Jet2Law::from_derivatives(k1, k2)?;
    law.degenerate_jet = model.degenerate_jet();
    Ok(law)
}

/// Cholesky inverse; on failure retries with jitter `1e-12, 1e-11, ...`
/// on the diagonal and gives up beyond `1e-8`.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.inverse());
    }
    let n = m.nrows();
    let mut jitter = 1e-12;
    while jitter <= 1e-8 * (1.0 + 1e-9) {
        let mj = m + DMatrix::<f64>::identity(n, n) * jitter;
        if let Some(c) = mj.cholesky() {
            return Ok(c.inverse());
        }
        jitter *= 10.0;
    }
    Err(Error::Singular(format!("{n}x{n} covariance is not positive definite even with jitter 1e-8")))
}

/// Gaussian regression on the jet of an isotropic field at the origin.
///
/// For a non-degenerate jet the conditioning vector is `(f, f11, f22, f12)`
/// (value-Hessian part) and `(f, f1, f2, f11, f22, f12)` (full jet). For the
/// random plane wave `f22 = -f - f11`, so `f22` is dropped from both bases and
/// `beta22 = 0`.
#[derive(Clone, Debug)]
pub struct RegressionFns {
    model: IsotropicModel,
    law: Jet2Law,
    vh_basis: Vec<&'static [usize]>,
    vh_inv: DMatrix<f64>,
    jet_basis: Vec<&'static [usize]>,
    jet_inv: DMatrix<f64>,
}

pub fn regression_fns(model: &IsotropicModel, law: &Jet2Law) -> Result<RegressionFns> {
    if law.is_degenerate() && !model.degenerate_jet() {
        return Err(Error::Degeneracy(format!(
            "chi = sqrt(2) for model '{}'; a degenerate (f, Hess f) at 0 is only supported for the random plane wave",
            model.name()
        )));
    }
    let (vh_basis, jet_basis): (Vec<&'static [usize]>, Vec<&'static [usize]>) = if model.degenerate_jet() {
        (vec![&[], &[0, 0], &[0, 1]], vec![&[], &[0], &[1], &[0, 0], &[0, 1]])
    } else {
        (VALUE_HESSIAN.to_vec(), JET.to_vec())
    };
    let inv = |basis: &[&[usize]]| -> Result<DMatrix<f64>> {
        spd_inverse(&jet_covariance(model, basis)).map_err(|e| match model.degenerate_jet() {
            true => e,
            false => Error::Degeneracy(format!(
                "{e}; a degenerate (f, Hess f) at 0 is only supported for the random plane wave"
            )),
        })
    };
    Ok(RegressionFns {
        model: model.clone(),
        law: law.clone(),
        vh_inv: inv(&vh_basis)?,
        vh_basis,
        jet_inv: inv(&jet_basis)?,
        jet_basis,
    })
}

impl RegressionFns {
    pub fn model(&self) -> &IsotropicModel {
        &self.model
    }

    pub fn law(&self) -> &Jet2Law {
        &self.law
    }

    /// `E(f(t) | f(0)=u, Hess f(0)=U) = alpha(t) u + beta(t) . U`.
    pub fn alpha(&self, t: [f64; 2]) -> f64 {
        self.alpha_beta(t).0
    }

    /// `(beta11, beta22, beta12)`.
    pub fn beta(&self, t: [f64; 2]) -> [f64; 3] {
        self.alpha_beta(t).1
    }

    pub fn alpha_beta(&self, t: [f64; 2]) -> (f64, [f64; 3]) {
        if self.model.is_rpw() {
            rpw_alpha_beta(t)
        } else {
            self.alpha_beta_partial(t, &[])
        }
    }

    /// `d^idx` of `(alpha, beta)` at `t`, by regression on the covariance.
    pub fn alpha_beta_partial(&self, t: [f64; 2], idx: &[usize]) -> (f64, [f64; 3]) {
        let c = self.regress(t, idx, &self.vh_basis, &self.vh_inv);
        if self.vh_basis.len() == 4 {
            (c[0], [c[1], c[2], c[3]])
        } else {
            (c[0], [c[1], 0.0, c[2]])
        }
    }

    fn regress(&self, t: [f64; 2], idx: &[usize], basis: &[&[usize]], inv: &DMatrix<f64>) -> DVector<f64> {
        let row = DVector::from_iterator(
            basis.len(),
            basis.iter().map(|b| cross_cov(&self.model, t, idx, [0.0; 2], b)),
        );
        inv * row
    }

    /// Weights `c(t)` with `E(d^idx f(t) | jet) = c(t) . jet`, where the jet
    /// is ordered as [`Self::jet_basis`].
    pub fn jet_weights(&self, t: [f64; 2], idx: &[usize]) -> DVector<f64> {
        self.regress(t, idx, &self.jet_basis, &self.jet_inv)
    }

    pub fn jet_basis(&self) -> &[&'static [usize]] {
        &self.jet_basis
    }

    /// Covariance of the field at `s` and `t` given the full jet at 0.
    pub fn gamma(&self, s: [f64; 2], t: [f64; 2]) -> f64 {
        let cs = DVector::from_iterator(
            self.jet_basis.len(),
            self.jet_basis.iter().map(|b| cross_cov(&self.model, s, &[], [0.0; 2], b)),
        );
        let ct = DVector::from_iterator(
            self.jet_basis.len(),
            self.jet_basis.iter().map(|b| cross_cov(&self.model, t, &[], [0.0; 2], b)),
        );
        self.model.value([s[0] - t[0], s[1] - t[1]]) - (cs.transpose() * &self.jet_inv * ct)[(0, 0)]
    }

    /// Coefficient of the eigenvalue whose eigenvector has angle `theta`.
    pub fn b1(&self, t: [f64; 2], theta: f64) -> f64 {
        let [b11, b22, b12] = self.beta(t);
        let (s, c) = theta.sin_cos();
        c * c * b11 + s * s * b22 + s * c * b12
    }

    /// Coefficient of the eigenvalue whose eigenvector has angle `theta + pi/2`.
    pub fn b2(&self, t: [f64; 2], theta: f64) -> f64 {
        let [b11, b22, b12] = self.beta(t);
        let (s, c) = theta.sin_cos();
        s * s * b11 + c * c * b22 - s * c * b12
    }
}

/// Closed-form plane-wave regression weights.
pub fn rpw_alpha_beta(t: [f64; 2]) -> (f64, [f64; 3]) {
    let r2 = t[0] * t[0] + t[1] * t[1];
    if r2 == 0.0 {
        return (1.0, [0.0; 3]);
    }
    let mut j = [0.0; 3];
    bessel_j_all(r2.sqrt(), &mut j);
    let c2 = (t[0] * t[0] - t[1] * t[1]) / r2;
    let s2 = t[0] * t[1] / r2;
    (j[0] + 2.0 * c2 * j[2], [4.0 * c2 * j[2], 0.0, 8.0 * s2 * j[2]])
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub enum MonotonicityWitness {
    /// `chi < 1`
    Chi(f64),
    /// The planar kernel inequality fails at this point.
    Planar([f64; 2]),
    /// The radial kernel inequality fails at this `y = |x|^2`.
    Radial(f64),
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct MonotonicityCheck {
    pub passed: bool,
    pub witness: Option<MonotonicityWitness>,
    /// `c` with the rescaled profile `k(c y)` having derivative `-1` at 0.
    pub scale: f64,
    pub chi: f64,
}

/// Checks the kernel conditions under which the lower-connected saddle
/// fraction is monotone in the level, after rescaling to `k'(0) = -1`.
/// Radial grid `y in [0, 20]` step 0.05 and planar grid `[-4, 4]^2` step
/// 0.2 used when no grids are given.
pub fn default_monotonicity_grids() -> (Vec<f64>, Vec<[f64; 2]>) {
    let radial = (0..=400).map(|i| i as f64 * 0.05).collect();
    let planar = (-20..=20)
        .flat_map(|i| (-20..=20).map(move |j| [i as f64 * 0.2, j as f64 * 0.2]))
        .collect();
    (radial, planar)
}

pub fn check_monotonicity_assumption(
    model: &IsotropicModel,
    radial_grid: &[f64],
    planar_grid: &[[f64; 2]],
) -> Result<MonotonicityCheck> {
    if model.degenerate_jet() {
        return Err(Error::NotApplicable(format!(
            "model '{}' has a degenerate 2-jet; the kernel monotonicity conditions do not apply",
            model.name()
        )));
    }
    let law = jet2_law(model)?;
    let c = -1.0 / law.k1;
    let ks = |y: f64| {
        let d = model.k_derivs(c * y);
        [d[0], c * d[1], c * c * d[2]]
    };
    let k2_0 = c * c * law.k2;
    let denom = 2.0 * k2_0 - 1.0;
    if denom.abs() < 1e-12 {
        return Err(Error::Domain(
            "2k''(0) = 1 after rescaling; the radial condition is undefined".into(),
        ));
    }
    let done = |witness| MonotonicityCheck {
        passed: false,
        witness: Some(witness),
        scale: c,
        chi: law.chi,
    };
    if law.chi < 1.0 {
        return Ok(done(MonotonicityWitness::Chi(law.chi)));
    }
    for &x in planar_grid {
        let y = x[0] * x[0] + x[1] * x[1];
        let [k, k1, k2] = ks(y);
        let v = (k + k1) * k2_0 + (x[0] * x[0] * (3.0 * k2_0 - 1.0) + x[1] * x[1] * (1.0 - k2_0)) * k2;
        if v < -1e-10 {
            return Ok(done(MonotonicityWitness::Planar(x)));
        }
    }
    for &y in radial_grid {
        let [k, k1, k2] = ks(y);
        let v = (2.0 * k2_0 * k + y * k2 + k1) / denom;
        if v > 1.0 + 1e-10 {
            return Ok(done(MonotonicityWitness::Radial(y)));
        }
    }
    Ok(MonotonicityCheck {
        passed: true,
        witness: None,
        scale: c,
        chi: law.chi,
    })
}

pub const NONDEGENERACY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct DeterminantCheck {
    pub det: f64,
    /// `det / prod(diag)`, zero when some diagonal entry vanishes.
    pub normalized: f64,
    pub passed: bool,
}

impl DeterminantCheck {
    fn of(m: &DMatrix<f64>) -> Self {
        let det = m.determinant();
        let diag: f64 = m.diagonal().iter().product();
        let normalized = if diag > 0.0 { det / diag } else { 0.0 };
        DeterminantCheck {
            det,
            normalized,
            passed: normalized.abs() > NONDEGENERACY_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ProbeCheck {
    pub point: [f64; 2],
    pub conditional: DeterminantCheck,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct NondegeneracyReport {
    pub sigma0: DeterminantCheck,
    pub sigma_full: DeterminantCheck,
    pub probes: Vec<ProbeCheck>,
}

impl NondegeneracyReport {
    pub fn all_passed(&self) -> bool {
        self.sigma0.passed && self.sigma_full.passed && self.probes.iter().all(|p| p.conditional.passed)
    }
}

/// Moore-Penrose inverse of a symmetric matrix, dropping eigenvalues below
/// `1e-12` of the largest.
fn symmetric_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let inv = eig
        .eigenvalues
        .map(|v| if v.abs() > 1e-12 * top { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Determinants of the jet covariances at 0 and, at each probe `t`, of
/// `Cov((f(t), grad f(t)) | jet at 0)` by Schur complement.
pub fn check_nondegeneracy(kernel: &dyn CovarianceKernel, probe_points: &[[f64; 2]]) -> Result<NondegeneracyReport> {
    if probe_points.iter().any(|p| p[0] == 0.0 && p[1] == 0.0) {
        return Err(Error::invalid("probe points must be non-zero"));
    }
    let sigma0 = jet_covariance(kernel, &VALUE_HESSIAN);
    let sigma_full = jet_covariance(kernel, &JET);
    let pinv = symmetric_pinv(&sigma_full);
    let here: [&[usize]; 3] = [&[], &[0], &[1]];
    let probes = probe_points
        .iter()
        .map(|&t| {
            let a = DMatrix::from_fn(3, 3, |i, j| cross_cov(kernel, t, here[i], t, here[j]));
            let b = DMatrix::from_fn(3, 6, |i, j| cross_cov(kernel, t, here[i], [0.0; 2], JET[j]));
            let cond = &a - &b * &pinv * b.transpose();
            ProbeCheck {
                point: t,
                conditional: DeterminantCheck::of(&cond),
            }
        })
        .collect();
    Ok(NondegeneracyReport {
        sigma0: DeterminantCheck::of(&sigma0),
        sigma_full: DeterminantCheck::of(&sigma_full),
        probes,
    })
}
