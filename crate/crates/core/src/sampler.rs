//! Field realizations on square grids, Hessian draws at a conditioned saddle,
//! and the field conditioned to have a saddle at the origin at a given level.
//!
//! Grid layout: with `m = ceil((R + pad)/h)` and `n = 2m + 1`, node `(i, j)`
//! sits at `x = (j - m) h`, `y = (i - m) h` and is stored at `values[i*n + j]`;
//! the origin is node `(m, m)`.

use std::f64::consts::{PI, SQRT_2};
use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::covariance::{jet2_law, regression_fns, IsotropicModel, Jet2Law, RegressionFns, SpectralMeasure};
use crate::error::{Error, Result};
use crate::specfun::{bessel_j_all, DEFAULT_MAX_BESSEL_ORDER};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridSpec {
    pub radius: f64,
    pub spacing: f64,
    pub pad: f64,
}

pub const DEFAULT_PAD: f64 = 2.0;
/// Largest grid half-width (in nodes) accepted anywhere, including decoding.
pub const MAX_HALF_NODES: usize = 1 << 14;

impl GridSpec {
    pub fn new(radius: f64, spacing: f64) -> Result<Self> {
        Self::with_pad(radius, spacing, DEFAULT_PAD)
    }

    pub fn with_pad(radius: f64, spacing: f64, pad: f64) -> Result<Self> {
        let g = GridSpec { radius, spacing, pad };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid(format!("grid radius must be positive, got {}", self.radius)));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::invalid(format!("grid spacing must be positive, got {}", self.spacing)));
        }
        if !(self.pad >= 0.0 && self.pad.is_finite()) {
            return Err(Error::invalid(format!("grid pad must be non-negative, got {}", self.pad)));
        }
        let m = ((self.radius + self.pad) / self.spacing - 1e-9).ceil();
        if m > MAX_HALF_NODES as f64 {
            return Err(Error::invalid(format!("grid of {m} half-nodes is too large")));
        }
        Ok(())
    }

    /// `m`: nodes from the origin to the edge.
    pub fn half_nodes(&self) -> usize {
        (((self.radius + self.pad) / self.spacing - 1e-9).ceil() as usize).max(1)
    }

    /// `n = 2m + 1` nodes per side.
    pub fn side(&self) -> usize {
        2 * self.half_nodes() + 1
    }

    pub fn coord(&self, j: usize) -> f64 {
        (j as f64 - self.half_nodes() as f64) * self.spacing
    }

    /// Half-width of the sampled square.
    pub fn extent(&self) -> f64 {
        self.half_nodes() as f64 * self.spacing
    }
}

/// Hessian at a conditioned saddle, by eigen-decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum SaddleDraw {
    /// Eigenvalue `lambda1 < 0` along `(cos theta, sin theta)`, `lambda2 > 0`
    /// along the perpendicular direction.
    Isotropic { lambda1: f64, lambda2: f64, theta: f64 },
    /// Random plane wave: eigenvalue `lambda > 0` along `theta` and
    /// `-(lambda + level)` perpendicular to it.
    Rpw { lambda: f64, theta: f64 },
}

impl SaddleDraw {
    /// `(Z11, Z22, Z12)` at the given level.
    pub fn hessian(&self, level: f64) -> [f64; 3] {
        match *self {
            SaddleDraw::Isotropic { lambda1, lambda2, theta } => {
                let (s, c) = theta.sin_cos();
                [
                    lambda1 * c * c + lambda2 * s * s,
                    lambda1 * s * s + lambda2 * c * c,
                    (lambda1 - lambda2) * s * c,
                ]
            }
            SaddleDraw::Rpw { lambda, theta } => {
                let (s2, c2) = (2.0 * theta).sin_cos();
                let a = 0.5 * level + lambda;
                [-0.5 * level + a * c2, -0.5 * level - a * c2, a * s2]
            }
        }
    }

    /// Angle of the eigenvector of the negative eigenvalue.
    pub fn negative_direction(&self) -> f64 {
        match *self {
            SaddleDraw::Isotropic { theta, .. } => theta,
            SaddleDraw::Rpw { theta, .. } => theta + 0.5 * PI,
        }
    }

    /// `(negative, positive)` eigenvalues.
    pub fn eigenvalues(&self, level: f64) -> (f64, f64) {
        match *self {
            SaddleDraw::Isotropic { lambda1, lambda2, .. } => (lambda1, lambda2),
            SaddleDraw::Rpw { lambda, .. } => (-(lambda + level), lambda),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            SaddleDraw::Isotropic { .. } => 1,
            SaddleDraw::Rpw { .. } => 2,
        }
    }

    fn reals(&self) -> [f64; 3] {
        match *self {
            SaddleDraw::Isotropic { lambda1, lambda2, theta } => [lambda1, lambda2, theta],
            SaddleDraw::Rpw { lambda, theta } => [lambda, theta, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum SampleKind {
    Unconditional,
    Conditional { level: f64, draw: SaddleDraw },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub model_name: String,
    pub seed: u64,
    pub kind: SampleKind,
}

impl FieldSample {
    /// Samples a function exactly at the grid nodes.
    pub fn from_fn(grid: GridSpec, name: &str, f: impl Fn(f64, f64) -> f64) -> Self {
        let n = grid.side();
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            let y = grid.coord(i);
            for j in 0..n {
                values.push(f(grid.coord(j), y));
            }
        }
        FieldSample {
            grid,
            values,
            model_name: name.to_string(),
            seed: 0,
            kind: SampleKind::Unconditional,
        }
    }

    pub fn side(&self) -> usize {
        self.grid.side()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.side() + j]
    }

    pub fn level(&self) -> Option<f64> {
        match self.kind {
            SampleKind::Conditional { level, .. } => Some(level),
            SampleKind::Unconditional => None,
        }
    }

    /// Bilinear interpolation; `None` outside the sampled square.
    pub fn interpolate(&self, x: f64, y: f64) -> Option<f64> {
        let h = self.grid.spacing;
        let m = self.grid.half_nodes() as f64;
        let n = self.side();
        let (u, v) = (x / h + m, y / h + m);
        if !(u >= 0.0 && v >= 0.0 && u <= (n - 1) as f64 && v <= (n - 1) as f64) {
            return None;
        }
        let j = (u.floor() as usize).min(n - 2);
        let i = (v.floor() as usize).min(n - 2);
        let (a, b) = (u - j as f64, v - i as f64);
        Some(
            (1.0 - a) * (1.0 - b) * self.at(i, j)
                + a * (1.0 - b) * self.at(i, j + 1)
                + (1.0 - a) * b * self.at(i + 1, j)
                + a * b * self.at(i + 1, j + 1),
        )
    }

    /// Central-difference gradient at node `(i, j)`.
    pub fn grid_gradient(&self, i: usize, j: usize) -> [f64; 2] {
        let h2 = 2.0 * self.grid.spacing;
        [
            (self.at(i, j + 1) - self.at(i, j - 1)) / h2,
            (self.at(i + 1, j) - self.at(i - 1, j)) / h2,
        ]
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let name = self.model_name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        for v in [self.grid.radius, self.grid.spacing, self.grid.pad] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        let (tag, level, reals) = match self.kind {
            SampleKind::Unconditional => (0u8, 0.0, [0.0; 3]),
            SampleKind::Conditional { level, draw } => (draw.tag(), level, draw.reals()),
        };
        w.write_all(&[tag])?;
        w.write_all(&level.to_le_bytes())?;
        for v in reals {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_binary(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let name_len = cur.u32()? as usize;
        if name_len > 4096 {
            return Err(Error::Decode(format!("model name length {name_len} exceeds 4096")));
        }
        let model_name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Decode("model name is not UTF-8".into()))?
            .to_string();
        let grid = GridSpec {
            radius: cur.f64()?,
            spacing: cur.f64()?,
            pad: cur.f64()?,
        };
        grid.validate().map_err(|e| Error::Decode(format!("bad grid: {e}")))?;
        let seed = cur.u64()?;
        let tag = cur.take(1)?[0];
        let level = cur.f64()?;
        let reals = [cur.f64()?, cur.f64()?, cur.f64()?];
        let kind = match tag {
            0 => SampleKind::Unconditional,
            1 => SampleKind::Conditional {
                level,
                draw: SaddleDraw::Isotropic {
                    lambda1: reals[0],
                    lambda2: reals[1],
                    theta: reals[2],
                },
            },
            2 => SampleKind::Conditional {
                level,
                draw: SaddleDraw::Rpw {
                    lambda: reals[0],
                    theta: reals[1],
                },
            },
            t => return Err(Error::Decode(format!("unknown kind tag {t}"))),
        };
        let n = grid.side();
        let rest = &bytes[cur.pos..];
        let expected = n
            .checked_mul(n)
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| Error::Decode("grid size overflows".into()))?;
        if rest.len() != expected {
            return Err(Error::Decode(format!(
                "expected {expected} bytes of values for a {n}x{n} grid, found {}",
                rest.len()
            )));
        }
        let values = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(FieldSample {
            grid,
            values,
            model_name,
            seed,
            kind,
        })
    }

    /// Debug export: one `x,y,value` row per node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,value")?;
        let n = self.side();
        for i in 0..n {
            for j in 0..n {
                writeln!(w, "{},{},{}", self.grid.coord(j), self.grid.coord(i), self.at(i, j))?;
            }
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Decode(format!("truncated input at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replicate `index` under `master`: SplitMix64 of
/// `master + index * 0x9E3779B97F4A7C15`, so replicate streams depend only on
/// the pair and never on scheduling.
pub fn replicate_seed(master: u64, index: u64) -> u64 {
    splitmix64(master.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SamplerMethod {
    /// Bessel expansion for the random plane wave, FFT torus otherwise.
    Auto,
    BesselExpansion,
    SpectralFft,
    /// `sqrt(2/N) sum cos(w_j . x + phi_j)` with `w_j` from the spectral measure.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SampleParams {
    pub method: SamplerMethod,
    /// Number of waves for [`SamplerMethod::Cosine`].
    pub waves: usize,
}

impl Default for SampleParams {
    fn default() -> Self {
        SampleParams {
            method: SamplerMethod::Auto,
            waves: 4096,
        }
    }
}

/// A realized field in a form that can be differentiated anywhere.
#[derive(Clone, Debug)]
pub enum FieldRepr {
    /// `sum_n c_n J_n(r) e^{i n theta}` for `n = -order..=order`, stored at `n + order`.
    Bessel { order: usize, coeffs: Vec<Complex64> },
    /// `Re sum c e^{i w.x}` over the non-negligible torus modes.
    Fourier { modes: Vec<([f64; 2], Complex64)> },
    /// `amp * sum cos(w.x + phi)`.
    Cosine { amp: f64, waves: Vec<([f64; 2], f64)> },
}

impl FieldRepr {
    /// `d^idx f(x)`, `idx` as in [`crate::covariance::CovarianceKernel`].
    pub fn partial(&self, x: [f64; 2], idx: &[usize]) -> f64 {
        match self {
            FieldRepr::Bessel { order, coeffs } => {
                let mut c = coeffs.clone();
                let mut ord = *order;
                for &d in idx {
                    c = ladder(&c, ord, d);
                    ord += 1;
                }
                eval_bessel(&c, ord, x)
            }
            FieldRepr::Fourier { modes } => {
                let ik = Complex64::i().powu(idx.len() as u32);
                modes
                    .iter()
                    .map(|&(w, c)| {
                        let scale: f64 = idx.iter().map(|&d| w[d]).product();
                        let ph = Complex64::from_polar(1.0, w[0] * x[0] + w[1] * x[1]);
                        (c * ik * scale * ph).re
                    })
                    .sum()
            }
            FieldRepr::Cosine { amp, waves } => {
                amp * waves
                    .iter()
                    .map(|&(w, phi)| {
                        let scale: f64 = idx.iter().map(|&d| w[d]).product();
                        scale * (w[0] * x[0] + w[1] * x[1] + phi + idx.len() as f64 * 0.5 * PI).cos()
                    })
                    .sum::<f64>()
            }
        }
    }

    /// `(f, f1, f2, f11, f22, f12)` at the origin.
    pub fn jet_at_origin(&self) -> [f64; 6] {
        match self {
            FieldRepr::Fourier { modes } => {
                let mut j = [0.0; 6];
                for &([a, b], c) in modes {
                    j[0] += c.re;
                    j[1] -= a * c.im;
                    j[2] -= b * c.im;
                    j[3] -= a * a * c.re;
                    j[4] -= b * b * c.re;
                    j[5] -= a * b * c.re;
                }
                j
            }
            _ => {
                let mut j = [0.0; 6];
                for (k, idx) in crate::covariance::JET.iter().enumerate() {
                    j[k] = self.partial([0.0; 2], idx);
                }
                j
            }
        }
    }
}

/// Coefficients of `d/dx_d` of `sum c_n u_n`, with `u_n = J_n e^{in theta}`,
/// from `dx u_n = (u_{n-1} - u_{n+1})/2` and `dy u_n = i(u_{n-1} + u_{n+1})/2`.
fn ladder(c: &[Complex64], order: usize, d: usize) -> Vec<Complex64> {
    let new_order = order + 1;
    let mut out = vec![Complex64::new(0.0, 0.0); 2 * new_order + 1];
    for (k, &ck) in c.iter().enumerate() {
        let n = k as i64 - order as i64;
        let down = (n - 1 + new_order as i64) as usize;
        let up = (n + 1 + new_order as i64) as usize;
        if d == 0 {
            out[down] += ck * 0.5;
            out[up] -= ck * 0.5;
        } else {
            let h = ck * Complex64::new(0.0, 0.5);
            out[down] += h;
            out[up] += h;
        }
    }
    out
}

fn eval_bessel(c: &[Complex64], order: usize, x: [f64; 2]) -> f64 {
    let r = x[0].hypot(x[1]);
    let mut j = vec![0.0; order + 1];
    bessel_j_all(r, &mut j);
    let e1 = Complex64::new(x[0], x[1]) / if r > 0.0 { r } else { 1.0 };
    let mut acc = c[order] * j[0];
    let mut z = Complex64::new(1.0, 0.0);
    for n in 1..=order {
        z *= e1;
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        acc += c[order + n] * z * j[n] + c[order - n] * z.conj() * (sign * j[n]);
    }
    acc.re
}

/// An unconditional draw on the grid together with its analytic form.
#[derive(Clone, Debug)]
pub struct RealizedField {
    pub values: Vec<f64>,
    pub repr: FieldRepr,
}

enum Engine {
    Bessel(BesselEngine),
    Fourier(FourierEngine),
    Cosine { measure: SpectralMeasure, waves: usize },
}

struct BesselEngine {
    order: usize,
    /// Orbit representatives `(i, j)` with `0 <= i <= j <= m`, their angle,
    /// and `J_0..J_order` at their radius.
    orbits: Vec<(usize, usize, f64)>,
    table: Vec<f64>,
}

struct FourierEngine {
    size: usize,
    /// Non-negligible modes: torus index `(ky, kx)`, wave vector, amplitude.
    modes: Vec<(usize, usize, [f64; 2], f64)>,
    fft: Arc<dyn Fft<f64>>,
}

/// Draws unconditional realizations of one model on one grid.
pub struct FieldSampler {
    model: IsotropicModel,
    grid: GridSpec,
    engine: Engine,
}

/// Smallest 5-smooth integer `>= min`, a fast FFT length.
fn smooth_size(min: usize) -> usize {
    (min..)
        .find(|&v| {
            let mut x = v;
            for p in [2, 3, 5] {
                while x % p == 0 {
                    x /= p;
                }
            }
            x == 1
        })
        .unwrap()
}

/// Modes with `S(w) dw` below this are dropped from the torus sum.
const MODE_CUTOFF: f64 = 1e-36;

impl FieldSampler {
    pub fn new(model: &IsotropicModel, grid: GridSpec, params: SampleParams) -> Result<Self> {
        grid.validate()?;
        let limit = 0.3 * model.length_scale().min(1.0);
        if grid.spacing > limit + 1e-12 {
            return Err(Error::invalid(format!(
                "grid spacing {} exceeds {limit:.4} for model '{}'",
                grid.spacing,
                model.name()
            )));
        }
        let measure = model.spectral_measure().ok_or_else(|| {
            Error::Configuration(format!(
                "model '{}' has no spectral sampler; declare it as a Gaussian mixture to simulate it",
                model.name()
            ))
        })?;
        let method = match params.method {
            SamplerMethod::Auto if model.is_rpw() => SamplerMethod::BesselExpansion,
            SamplerMethod::Auto => SamplerMethod::SpectralFft,
            m => m,
        };
        let engine = match method {
            SamplerMethod::BesselExpansion => {
                if !model.is_rpw() {
                    return Err(Error::Configuration("the Bessel expansion applies to the random plane wave only".into()));
                }
                Engine::Bessel(BesselEngine::new(&grid)?)
            }
            SamplerMethod::SpectralFft => {
                if measure.density([0.0, 0.0]).is_none() {
                    return Err(Error::Configuration(format!(
                        "model '{}' has no spectral density; use the Bessel or cosine method",
                        model.name()
                    )));
                }
                Engine::Fourier(FourierEngine::new(&measure, &grid))
            }
            SamplerMethod::Cosine => {
                if params.waves == 0 {
                    return Err(Error::invalid("cosine method needs at least one wave"));
                }
                Engine::Cosine {
                    measure,
                    waves: params.waves,
                }
            }
            SamplerMethod::Auto => unreachable!(),
        };
        Ok(FieldSampler {
            model: model.clone(),
            grid,
            engine,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn model(&self) -> &IsotropicModel {
        &self.model
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> RealizedField {
        match &self.engine {
            Engine::Bessel(e) => e.draw(&self.grid, rng),
            Engine::Fourier(e) => e.draw(&self.grid, rng),
            Engine::Cosine { measure, waves } => draw_cosine(measure, *waves, &self.grid, rng),
        }
    }

    /// A sampler on the same square with spacing `h / factor` whose draws
    /// realize, for the same random stream, the same continuous field as this
    /// sampler's draws, observed on the finer nodes.
    pub fn refined(&self, factor: usize) -> Result<FieldSampler> {
        if factor == 0 {
            return Err(Error::invalid("refinement factor must be positive"));
        }
        let g = &self.grid;
        let grid = GridSpec::with_pad(g.radius, g.spacing / factor as f64, g.pad)?;
        if grid.half_nodes() != factor * g.half_nodes() {
            return Err(Error::invalid(format!(
                "(R + pad) / h = {} is not a whole number of nodes; the refined grid would not contain the original",
                (g.radius + g.pad) / g.spacing
            )));
        }
        let engine = match &self.engine {
            Engine::Bessel(e) => {
                let fine = BesselEngine::new(&grid)?;
                debug_assert_eq!(fine.order, e.order);
                Engine::Bessel(fine)
            }
            Engine::Fourier(e) => Engine::Fourier(e.refined(factor)),
            Engine::Cosine { measure, waves } => Engine::Cosine {
                measure: measure.clone(),
                waves: *waves,
            },
        };
        Ok(FieldSampler {
            model: self.model.clone(),
            grid,
            engine,
        })
    }

    /// A grid sample drawn from `rng_from_seed(seed)`.
    pub fn draw_seeded(&self, seed: u64) -> FieldSample {
        let field = self.draw(&mut rng_from_seed(seed));
        FieldSample {
            grid: self.grid,
            values: field.values,
            model_name: self.model.name().to_string(),
            seed,
            kind: SampleKind::Unconditional,
        }
    }
}

impl BesselEngine {
    fn new(grid: &GridSpec) -> Result<Self> {
        if grid.radius + grid.pad > 60.0 + 1e-9 {
            return Err(Error::Configuration(format!(
                "Bessel expansion needs R + pad <= 60, got {}",
                grid.radius + grid.pad
            )));
        }
        let r_total = grid.extent() * SQRT_2;
        let order = (r_total + 10.0 * r_total.cbrt() + 10.0).ceil() as usize;
        if order > DEFAULT_MAX_BESSEL_ORDER {
            return Err(Error::Configuration(format!(
                "Bessel truncation order {order} exceeds the maximum {DEFAULT_MAX_BESSEL_ORDER}"
            )));
        }
        let m = grid.half_nodes();
        let h = grid.spacing;
        let mut orbits = Vec::with_capacity((m + 1) * (m + 2) / 2);
        let mut table = Vec::with_capacity(orbits.capacity() * (order + 1));
        let mut buf = vec![0.0; order + 1];
        for i in 0..=m {
            for j in i..=m {
                let (x, y) = (j as f64 * h, i as f64 * h);
                bessel_j_all(x.hypot(y), &mut buf);
                orbits.push((i, j, y.atan2(x)));
                table.extend_from_slice(&buf);
            }
        }
        Ok(BesselEngine { order, orbits, table })
    }

    fn draw<R: Rng + ?Sized>(&self, grid: &GridSpec, rng: &mut R) -> RealizedField {
        let order = self.order;
        // a_0 ~ N(0, 1); Re a_m, Im a_m ~ N(0, 1/2) for m >= 1; a_{-m} = conj(a_m)
        let mut a = vec![Complex64::new(0.0, 0.0); order + 1];
        a[0] = Complex64::new(StandardNormal.sample(rng), 0.0);
        for am in a.iter_mut().skip(1) {
            let b: f64 = StandardNormal.sample(rng);
            let c: f64 = StandardNormal.sample(rng);
            *am = Complex64::new(b, c) * std::f64::consts::FRAC_1_SQRT_2;
        }
        let mut coeffs = vec![Complex64::new(0.0, 0.0); 2 * order + 1];
        for m in 0..=order {
            coeffs[order + m] = a[m];
            if m > 0 {
                // u_{-m} = (-1)^m J_m e^{-im theta}
                let s = if m % 2 == 0 { 1.0 } else { -1.0 };
                coeffs[order - m] = a[m].conj() * s;
            }
        }

        let half = grid.half_nodes() as i64;
        let n = grid.side();
        let mut values = vec![0.0; n * n];
        let i_pow = [
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 1.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, -1.0),
        ];
        let mut put = |x: i64, y: i64, v: f64| {
            values[((y + half) as usize) * n + (x + half) as usize] = v;
        };
        for (o, &(i, j, th)) in self.orbits.iter().enumerate() {
            let jv = &self.table[o * (order + 1)..(o + 1) * (order + 1)];
            let e1 = Complex64::from_polar(1.0, th);
            let mut z = Complex64::new(1.0, 0.0);
            let mut pa = [Complex64::new(0.0, 0.0); 4];
            let mut pb = [Complex64::new(0.0, 0.0); 4];
            for m in 0..=order {
                let w = if m == 0 { a[0] * 0.5 } else { a[m] } * jv[m];
                pa[m % 4] += w * z;
                pb[m % 4] += w * z.conj();
                z *= e1;
            }
            // image at angle s*th + k*pi/2 picks up i^{mk}
            let (x, y) = (j as i64, i as i64);
            let images_a = [(x, y), (-y, x), (-x, -y), (y, -x)];
            let images_b = [(x, -y), (y, x), (-x, y), (-y, -x)];
            for k in 0..4 {
                let mut sa = Complex64::new(0.0, 0.0);
                let mut sb = Complex64::new(0.0, 0.0);
                for c in 0..4 {
                    let f = i_pow[(c * k) % 4];
                    sa += pa[c] * f;
                    sb += pb[c] * f;
                }
                put(images_a[k].0, images_a[k].1, 2.0 * sa.re);
                put(images_b[k].0, images_b[k].1, 2.0 * sb.re);
            }
        }
        RealizedField {
            values,
            repr: FieldRepr::Bessel { order, coeffs },
        }
    }
}

impl FourierEngine {
    fn new(measure: &SpectralMeasure, grid: &GridSpec) -> Self {
        let h = grid.spacing;
        let n = grid.side();
        // K must be negligible at lags past the torus wrap: exp(-s^2 d^2/2) < 1e-21
        let corr = 1.0 / measure.min_scale().unwrap_or(1.0);
        let margin = (10.0 * corr / h).ceil() as usize;
        let size = smooth_size(n + margin);
        let l = size as f64 * h;
        let dw = 2.0 * PI / l;
        let cell = dw * dw;
        let mut modes = Vec::new();
        for ky in 0..size {
            let wy = dw * signed(ky, size) as f64;
            for kx in 0..size {
                let wx = dw * signed(kx, size) as f64;
                let s = measure.density([wx, wy]).unwrap_or(0.0) * cell;
                if s > MODE_CUTOFF {
                    modes.push((ky, kx, [wx, wy], s.sqrt()));
                }
            }
        }
        let fft = FftPlanner::new().plan_fft_inverse(size);
        FourierEngine { size, modes, fft }
    }

    /// Same torus length and mode order, `factor` times as many nodes.
    fn refined(&self, factor: usize) -> Self {
        let size = self.size * factor;
        let index = |k: usize| {
            let s = signed(k, self.size);
            if s >= 0 {
                s as usize
            } else {
                (size as i64 + s) as usize
            }
        };
        let modes = self.modes.iter().map(|&(ky, kx, w, a)| (index(ky), index(kx), w, a)).collect();
        let fft = FftPlanner::new().plan_fft_inverse(size);
        FourierEngine { size, modes, fft }
    }

    fn draw<R: Rng + ?Sized>(&self, grid: &GridSpec, rng: &mut R) -> RealizedField {
        let size = self.size;
        let zero = Complex64::new(0.0, 0.0);
        let mut spec = vec![zero; size * size];
        let mut rows = vec![false; size];
        let mut modes = Vec::with_capacity(self.modes.len());
        for &(ky, kx, w, amp) in &self.modes {
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            let c = Complex64::new(a, b) * amp;
            spec[ky * size + kx] = c;
            rows[ky] = true;
            modes.push((w, c));
        }
        let mut scratch = vec![zero; self.fft.get_inplace_scratch_len()];
        for (ky, used) in rows.iter().enumerate() {
            if *used {
                self.fft
                    .process_with_scratch(&mut spec[ky * size..(ky + 1) * size], &mut scratch);
            }
        }
        let half = grid.half_nodes();
        let n = grid.side();
        let torus = |i: usize| (i + size - half) % size;
        let mut values = vec![0.0; n * n];
        let mut col = vec![zero; size];
        for j in 0..n {
            let q = torus(j);
            for (ky, c) in col.iter_mut().enumerate() {
                *c = if rows[ky] { spec[ky * size + q] } else { zero };
            }
            self.fft.process_with_scratch(&mut col, &mut scratch);
            for i in 0..n {
                values[i * n + j] = col[torus(i)].re;
            }
        }
        RealizedField {
            values,
            repr: FieldRepr::Fourier { modes },
        }
    }
}

fn signed(k: usize, size: usize) -> i64 {
    if k < size.div_ceil(2) {
        k as i64
    } else {
        k as i64 - size as i64
    }
}

fn draw_cosine<R: Rng + ?Sized>(measure: &SpectralMeasure, count: usize, grid: &GridSpec, rng: &mut R) -> RealizedField {
    let waves: Vec<([f64; 2], f64)> = (0..count)
        .map(|_| {
            let w = measure.sample(rng);
            (w, rng.random::<f64>() * 2.0 * PI)
        })
        .collect();
    let amp = (2.0 / count as f64).sqrt();
    let n = grid.side();
    let coords: Vec<f64> = (0..n).map(|j| grid.coord(j)).collect();
    let mut acc = vec![Complex64::new(0.0, 0.0); n * n];
    let mut xs = vec![Complex64::new(0.0, 0.0); n];
    for &(w, phi) in &waves {
        for (x, &c) in xs.iter_mut().zip(&coords) {
            *x = Complex64::from_polar(1.0, w[0] * c);
        }
        for (i, &y) in coords.iter().enumerate() {
            let ey = Complex64::from_polar(1.0, w[1] * y + phi);
            for (a, x) in acc[i * n..(i + 1) * n].iter_mut().zip(&xs) {
                *a += ey * x;
            }
        }
    }
    RealizedField {
        values: acc.iter().map(|c| amp * c.re).collect(),
        repr: FieldRepr::Cosine { amp, waves },
    }
}

/// One unconditional realization from `rng_from_seed(seed)`.
pub fn sample_field(model: &IsotropicModel, grid: GridSpec, seed: u64, params: SampleParams) -> Result<FieldSample> {
    Ok(FieldSampler::new(model, grid, params)?.draw_seeded(seed))
}

/// Proposals allowed per saddle draw before giving up.
pub const MAX_PROPOSALS: u64 = 1_000_000;
/// Inflation of the proposal covariance over the Gaussian factor of `q_l`.
const PROPOSAL_INFLATION: f64 = 2.0;

/// Rejection sampler for `q_l(x, y) = |x| y (y - x) 1_{y>0>x}
/// exp(-[(x-m)^2 + (y-m)^2 + 2 tau (x-m)(y-m)] / (2 sigma^2))`, `m = mu l`.
#[derive(Clone, Debug)]
pub struct IsotropicSaddleSampler {
    level: f64,
    center: f64,
    sigma2: f64,
    tau: f64,
    chol: [f64; 3],
    log_envelope: f64,
}

impl IsotropicSaddleSampler {
    pub fn new(law: &Jet2Law, level: f64) -> Result<Self> {
        if law.is_degenerate() {
            return Err(Error::Degeneracy("the isotropic Hessian law needs chi < sqrt(2)".into()));
        }
        if !level.is_finite() {
            return Err(Error::Domain(format!("level must be finite, got {level}")));
        }
        let (s2, tau) = (law.sigma2, law.tau);
        // proposal covariance PROPOSAL_INFLATION * sigma^2/(1 - tau^2) [[1, -tau], [-tau, 1]]
        let v = PROPOSAL_INFLATION * s2 / (1.0 - tau * tau);
        let l11 = v.sqrt();
        let l21 = -tau * v / l11;
        let l22 = (v - l21 * l21).sqrt();
        let mut s = IsotropicSaddleSampler {
            level,
            center: law.mu * level,
            sigma2: s2,
            tau,
            chol: [l11, l21, l22],
            log_envelope: 0.0,
        };
        let sd = v.sqrt();
        let (x0, y1) = (s.center.min(0.0) - 12.0 * sd, s.center.max(0.0) + 12.0 * sd);
        let k = 400;
        let mut best = f64::NEG_INFINITY;
        for a in 1..=k {
            let x = x0 * a as f64 / k as f64;
            for b in 1..=k {
                let y = y1 * b as f64 / k as f64;
                best = best.max(s.log_weight(x, y));
            }
        }
        s.log_envelope = best + 1.05f64.ln();
        Ok(s)
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    fn quad(&self, x: f64, y: f64) -> f64 {
        let (u, v) = (x - self.center, y - self.center);
        (u * u + v * v + 2.0 * self.tau * u * v) / self.sigma2
    }

    /// `log(q_l / proposal density)` up to a constant.
    fn log_weight(&self, x: f64, y: f64) -> f64 {
        (-x).ln() + y.ln() + (y - x).ln() - 0.5 * (1.0 - 1.0 / PROPOSAL_INFLATION) * self.quad(x, y)
    }

    /// Unnormalized `q_l`.
    pub fn density(&self, x: f64, y: f64) -> f64 {
        if !(y > 0.0 && x < 0.0) {
            return 0.0;
        }
        -x * y * (y - x) * (-0.5 * self.quad(x, y)).exp()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SaddleDraw> {
        let mut log_env = self.log_envelope;
        let mut proposed = 0u64;
        let [l11, l21, l22] = self.chol;
        loop {
            if proposed >= MAX_PROPOSALS {
                return Err(Error::SamplerInefficiency {
                    accepted: 0,
                    proposed,
                    level: self.level,
                    envelope: log_env.exp(),
                });
            }
            proposed += 1;
            let z1: f64 = StandardNormal.sample(rng);
            let z2: f64 = StandardNormal.sample(rng);
            let u: f64 = rng.random();
            let x = self.center + l11 * z1;
            let y = self.center + l21 * z1 + l22 * z2;
            if !(x < 0.0 && y > 0.0) {
                continue;
            }
            let lw = self.log_weight(x, y);
            if lw > log_env {
                // envelope too low: raise it and restart this draw
                log_env = lw + 1.05f64.ln();
                continue;
            }
            if u.ln() < lw - log_env {
                let theta = rng.random::<f64>() * 2.0 * PI;
                return Ok(SaddleDraw::Isotropic {
                    lambda1: x,
                    lambda2: y,
                    theta,
                });
            }
        }
    }
}

/// Hessian draws at a conditioned saddle for one law and level.
#[derive(Clone, Debug)]
pub enum SaddleSampler {
    Isotropic(IsotropicSaddleSampler),
    /// `lambda` has density proportional to `x(x+l)(2x+l) exp(-4x(x+l))` on
    /// `x > max(0, -l)`; `u = x(x+l)` is Gamma(2, rate 4), so it is drawn exactly.
    Rpw { level: f64 },
}

impl SaddleSampler {
    pub fn new(law: &Jet2Law, level: f64) -> Result<Self> {
        if law.is_degenerate() {
            if !law.degenerate_jet {
                return Err(Error::Degeneracy(
                    "chi = sqrt(2) without the random plane wave flag has no Hessian sampler".into(),
                ));
            }
            if !level.is_finite() {
                return Err(Error::Domain(format!("level must be finite, got {level}")));
            }
            return Ok(SaddleSampler::Rpw { level });
        }
        Ok(SaddleSampler::Isotropic(IsotropicSaddleSampler::new(law, level)?))
    }

    pub fn level(&self) -> f64 {
        match self {
            SaddleSampler::Isotropic(s) => s.level,
            SaddleSampler::Rpw { level } => *level,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SaddleDraw> {
        match self {
            SaddleSampler::Isotropic(s) => s.draw(rng),
            SaddleSampler::Rpw { level } => {
                let e1: f64 = Exp1.sample(rng);
                let e2: f64 = Exp1.sample(rng);
                let u = 0.25 * (e1 + e2);
                let l = *level;
                // root of x^2 + l x - u = 0 above max(0, -l), in a cancellation-free form
                let disc = (l * l + 4.0 * u).sqrt();
                let lambda = if l >= 0.0 { 2.0 * u / (l + disc) } else { 0.5 * (disc - l) };
                let theta = rng.random::<f64>() * 2.0 * PI;
                Ok(SaddleDraw::Rpw { lambda, theta })
            }
        }
    }
}

pub fn sample_saddle_hessian(model: &IsotropicModel, law: &Jet2Law, level: f64, seed: u64) -> Result<SaddleDraw> {
    if law.degenerate_jet != model.degenerate_jet() {
        return Err(Error::invalid("law does not belong to the model"));
    }
    SaddleSampler::new(law, level)?.draw(&mut rng_from_seed(seed))
}

/// Draws of the field conditioned on a saddle at the origin, sharing the
/// regression weights of every grid node across draws.
pub struct ConditionalSampler {
    base: FieldSampler,
    reg: Arc<RegressionFns>,
    /// Jet weights `W(t)` per node, `basis` entries each.
    weights: Vec<f64>,
    basis: usize,
}

/// Indices into `(f, f1, f2, f11, f22, f12)` of each regression basis entry.
fn basis_positions(reg: &RegressionFns) -> Vec<usize> {
    reg.jet_basis()
        .iter()
        .map(|b| crate::covariance::JET.iter().position(|j| j == b).unwrap())
        .collect()
}

impl ConditionalSampler {
    pub fn new(model: &IsotropicModel, grid: GridSpec, params: SampleParams) -> Result<Self> {
        let base = FieldSampler::new(model, grid, params)?;
        let law = jet2_law(model)?;
        let reg = Arc::new(regression_fns(model, &law)?);
        let basis = reg.jet_basis().len();
        let n = grid.side();
        let mut weights = Vec::with_capacity(n * n * basis);
        for i in 0..n {
            let y = grid.coord(i);
            for j in 0..n {
                let w = reg.jet_weights([grid.coord(j), y], &[]);
                weights.extend(w.iter());
            }
        }
        Ok(ConditionalSampler {
            base,
            reg,
            weights,
            basis,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        self.base.grid()
    }

    pub fn model(&self) -> &IsotropicModel {
        self.base.model()
    }

    pub fn law(&self) -> &Jet2Law {
        self.reg.law()
    }

    pub fn saddle_sampler(&self, level: f64) -> Result<SaddleSampler> {
        SaddleSampler::new(self.reg.law(), level)
    }

    /// A conditional draw; the sample's seed field is set to `seed` and the
    /// randomness comes from `rng_from_seed(seed)`.
    pub fn draw_seeded(&self, saddle: &SaddleSampler, seed: u64) -> Result<ConditionalField> {
        let mut rng = rng_from_seed(seed);
        let mut out = self.draw(saddle, &mut rng)?;
        out.sample.seed = seed;
        Ok(out)
    }

    pub fn draw<R: Rng + ?Sized>(&self, saddle: &SaddleSampler, rng: &mut R) -> Result<ConditionalField> {
        let level = saddle.level();
        let field = self.base.draw(rng);
        let draw = saddle.draw(rng)?;
        let jet = field.repr.jet_at_origin();
        let [z11, z22, z12] = draw.hessian(level);
        let target = [level, 0.0, 0.0, z11, z22, z12];
        let delta: Vec<f64> = basis_positions(&self.reg)
            .into_iter()
            .map(|p| target[p] - jet[p])
            .collect();
        let mut values = field.values;
        for (v, w) in values.iter_mut().zip(self.weights.chunks_exact(self.basis)) {
            let mut acc = 0.0;
            for (wk, dk) in w.iter().zip(&delta) {
                acc += wk * dk;
            }
            *v += acc;
        }
        Ok(ConditionalField {
            sample: FieldSample {
                grid: *self.grid(),
                values,
                model_name: self.model().name().to_string(),
                seed: 0,
                kind: SampleKind::Conditional { level, draw },
            },
            base: field.repr,
            reg: self.reg.clone(),
            delta,
        })
    }
}

/// A conditional draw with its analytic form
/// `f(t) + W(t) . (target jet - jet of f at 0)`.
#[derive(Clone, Debug)]
pub struct ConditionalField {
    pub sample: FieldSample,
    pub base: FieldRepr,
    reg: Arc<RegressionFns>,
    delta: Vec<f64>,
}

impl ConditionalField {
    pub fn partial(&self, t: [f64; 2], idx: &[usize]) -> f64 {
        let w = self.reg.jet_weights(t, idx);
        self.base.partial(t, idx) + w.iter().zip(&self.delta).map(|(a, b)| a * b).sum::<f64>()
    }

    /// `(f, f1, f2, f11, f22, f12)` at `t`.
    pub fn jet(&self, t: [f64; 2]) -> [f64; 6] {
        let mut out = [0.0; 6];
        for (k, idx) in crate::covariance::JET.iter().enumerate() {
            out[k] = self.partial(t, idx);
        }
        out
    }
}

/// One conditional draw from `rng_from_seed(seed)`.
pub fn sample_conditional_field(
    model: &IsotropicModel,
    level: f64,
    grid: GridSpec,
    seed: u64,
    params: SampleParams,
) -> Result<ConditionalField> {
    let cs = ConditionalSampler::new(model, grid, params)?;
    let saddle = cs.saddle_sampler(level)?;
    cs.draw_seeded(&saddle, seed)
}
