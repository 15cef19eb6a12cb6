//! Monte Carlo estimators built on the samplers and the topology routines.
//!
//! Replicate `i` of a run with master seed `s` always uses the stream
//! `replicate_seed(s, i)`, and results are gathered in index order before any
//! summation, so the worker count never changes an output value.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::covariance::{check_monotonicity_assumption, default_monotonicity_grids, IsotropicModel};
use crate::critdens::CritKind;
use crate::error::{Error, Result};
use crate::sampler::{replicate_seed, ConditionalSampler, FieldSampler, GridSpec, SampleParams};
use crate::topology::{
    arm_event, classify_saddle_at_origin, count_components, count_components_anchored, count_four_arm_saddles, find_critical_points,
    SaddleClass, Window,
};

/// Replication settings shared by every estimator.
#[derive(Clone, Debug, Serialize)]
pub struct McConfig {
    pub n_reps: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    pub edge: EdgeRule,
    #[serde(skip)]
    pub params: SampleParams,
}

/// Which components a count over `B(R)` includes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeRule {
    /// Components contained in `B(R)`; the finite-volume count itself.
    #[default]
    Contained,
    /// Components anchored in `B(R)`, labelled over `B(R + margin)`; an
    /// edge-corrected estimate of the limiting density.
    Anchored { margin: f64 },
}

impl McConfig {
    pub fn new(n_reps: usize, seed: u64) -> Self {
        McConfig {
            n_reps,
            seed,
            workers: 1,
            edge: EdgeRule::Contained,
            params: SampleParams::default(),
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_edge(mut self, edge: EdgeRule) -> Self {
        self.edge = edge;
        self
    }

    fn check(&self) -> Result<()> {
        if self.n_reps < 1 {
            return Err(Error::invalid("n_reps must be at least 1"));
        }
        Ok(())
    }

    /// Runs `task(i, replicate_seed(seed, offset + i))` for every replicate,
    /// returning results in index order.
    fn map<T, F>(&self, offset: u64, task: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, u64) -> Result<T> + Sync + Send,
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Configuration(format!("worker pool: {e}")))?;
        let seed = self.seed;
        pool.install(|| {
            (0..self.n_reps)
                .into_par_iter()
                .map(|i| task(i, replicate_seed(seed, offset + i as u64)))
                .collect()
        })
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Sample mean and `sd / sqrt(n)`; the standard error of a single value is
/// NaN.
pub fn mean_and_se(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return Err(Error::invalid("no replicates to average"));
    }
    let mean = compensated_sum(values.iter().copied()) / n as f64;
    if n == 1 {
        return Ok((mean, f64::NAN));
    }
    let var = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateWithCI {
    pub quantity: String,
    pub model: String,
    pub level: f64,
    pub radius: f64,
    pub spacing: f64,
    pub value: f64,
    pub std_error: f64,
    pub n_reps: usize,
    pub master_seed: u64,
}

impl EstimateWithCI {
    fn from_values(quantity: &str, meta: &Meta, values: &[f64]) -> Result<Self> {
        let (value, std_error) = mean_and_se(values)?;
        Ok(EstimateWithCI {
            quantity: quantity.to_string(),
            model: meta.model.clone(),
            level: meta.level,
            radius: meta.radius,
            spacing: meta.spacing,
            value,
            std_error,
            n_reps: values.len(),
            master_seed: meta.seed,
        })
    }

    /// `value - k * std_error`
    pub fn lower(&self, k: f64) -> f64 {
        self.value - k * self.std_error
    }

    /// `value + k * std_error`
    pub fn upper(&self, k: f64) -> f64 {
        self.value + k * self.std_error
    }

    /// `sqrt(se_a^2 + se_b^2)`
    pub fn combined_se(&self, other: &EstimateWithCI) -> f64 {
        self.std_error.hypot(other.std_error)
    }
}

#[derive(Clone, Debug)]
struct Meta {
    model: String,
    level: f64,
    radius: f64,
    spacing: f64,
    seed: u64,
}

impl Meta {
    fn new(model: &IsotropicModel, level: f64, radius: f64, spacing: f64, mc: &McConfig) -> Self {
        Meta {
            model: model.name().to_string(),
            level,
            radius,
            spacing,
            seed: mc.seed,
        }
    }

    fn at(&self, level: f64, radius: f64) -> Meta {
        Meta {
            level,
            radius,
            ..self.clone()
        }
    }
}

pub const CSV_HEADER: &str = "model,level,R,h,n_reps,estimate,std_error,quantity";

pub fn write_estimates_csv<W: Write>(mut w: W, rows: &[EstimateWithCI]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.model, r.level, r.radius, r.spacing, r.n_reps, r.value, r.std_error, r.quantity
        )?;
    }
    Ok(())
}

fn require_scale(model: &IsotropicModel, radius: f64) -> Result<()> {
    let ell = model.length_scale();
    if radius < 5.0 * ell {
        return Err(Error::invalid(format!(
            "R = {radius} is below 5 correlation lengths ({})",
            5.0 * ell
        )));
    }
    Ok(())
}

fn area(radius: f64) -> f64 {
    PI * radius * radius
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentDensity {
    pub c_es: EstimateWithCI,
    pub c_ls: EstimateWithCI,
}

/// `N_ES / (pi R^2)` and `N_LS / (pi R^2)` averaged over unconditional draws.
pub fn estimate_component_density(
    model: &IsotropicModel,
    level: f64,
    radius: f64,
    spacing: f64,
    mc: &McConfig,
) -> Result<ComponentDensity> {
    let mut rows = estimate_component_densities(model, &[level], radius, spacing, mc)?;
    Ok(rows.remove(0))
}

/// As [`estimate_component_density`] for several levels on common draws.
pub fn estimate_component_densities(
    model: &IsotropicModel,
    levels: &[f64],
    radius: f64,
    spacing: f64,
    mc: &McConfig,
) -> Result<Vec<ComponentDensity>> {
    mc.check()?;
    require_scale(model, radius)?;
    let counts = component_counts(model, levels, radius, spacing, mc)?;
    let meta = Meta::new(model, 0.0, radius, spacing, mc);
    let a = area(radius);
    levels
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let es: Vec<f64> = counts.iter().map(|c| c[k].0 as f64 / a).collect();
            let ls: Vec<f64> = counts.iter().map(|c| c[k].1 as f64 / a).collect();
            Ok(ComponentDensity {
                c_es: EstimateWithCI::from_values("c_es", &meta.at(l, radius), &es)?,
                c_ls: EstimateWithCI::from_values("c_ls", &meta.at(l, radius), &ls)?,
            })
        })
        .collect()
}

/// Per replicate and level, `(n_es, n_ls)` inside `B(R)`.
fn component_counts(
    model: &IsotropicModel,
    levels: &[f64],
    radius: f64,
    spacing: f64,
    mc: &McConfig,
) -> Result<Vec<Vec<(usize, usize)>>> {
    let margin = match mc.edge {
        EdgeRule::Contained => 0.0,
        EdgeRule::Anchored { margin } if margin >= 0.0 => margin,
        EdgeRule::Anchored { margin } => return Err(Error::invalid(format!("negative edge margin {margin}"))),
    };
    let sampler = FieldSampler::new(model, GridSpec::new(radius + margin, spacing)?, mc.params)?;
    mc.map(0, |_, seed| {
        let s = sampler.draw_seeded(seed);
        levels
            .iter()
            .map(|&l| match mc.edge {
                EdgeRule::Contained => count_components(&s, l, radius).map(|r| (r.n_es, r.n_ls)),
                EdgeRule::Anchored { margin } => {
                    count_components_anchored(&s, l, radius, margin).map(|r| (r.n_es, r.n_ls))
                }
            })
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioReport {
    pub level: f64,
    pub p_lower: EstimateWithCI,
    pub p_upper: EstimateWithCI,
    pub p_fourarm: EstimateWithCI,
    /// Draws whose saddle could not be classified; excluded from the fractions.
    pub failures: usize,
}

fn monotonicity_gate(model: &IsotropicModel, exploratory: bool) -> Result<()> {
    if model.is_rpw() || exploratory {
        return Ok(());
    }
    let (radial, planar) = default_monotonicity_grids();
    let check = check_monotonicity_assumption(model, &radial, &planar)?;
    if !check.passed {
        return Err(Error::Configuration(format!(
            "model {} fails the monotonicity assumption ({:?}); rerun as exploratory",
            model.name(),
            check.witness
        )));
    }
    Ok(())
}

/// Fractions of conditional draws whose origin saddle is lower connected,
/// upper connected or four-arm within `B(R)`.
pub fn estimate_connectivity_ratio(
    model: &IsotropicModel,
    level: f64,
    radius: f64,
    spacing: f64,
    mc: &McConfig,
    exploratory: bool,
) -> Result<RatioReport> {
    let mut rows = estimate_connectivity_ratios(model, &[level], radius, spacing, mc, exploratory)?;
    Ok(rows.remove(0))
}

/// As [`estimate_connectivity_ratio`] over a level grid. Every level uses
/// the same replicate seeds.
pub fn estimate_connectivity_ratios(
    model: &IsotropicModel,
    levels: &[f64],
    radius: f64,
    spacing: f64,
    mc: &McConfig,
    exploratory: bool,
) -> Result<Vec<RatioReport>> {
    mc.check()?;
    monotonicity_gate(model, exploratory)?;
    let cs = ConditionalSampler::new(model, GridSpec::new(radius, spacing)?, mc.params)?;
    let meta = Meta::new(model, 0.0, radius, spacing, mc);
    levels
        .iter()
        .map(|&level| {
            let saddle = cs.saddle_sampler(level)?;
            let classes = mc.map(0, |_, seed| {
                let field = cs.draw_seeded(&saddle, seed)?;
                match classify_saddle_at_origin(&field.sample, radius, None) {
                    Ok(c) => Ok(Some(c.class)),
                    Err(Error::EpsilonTooLarge { .. } | Error::BothJoined { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            })?;
            ratio_report(&meta.at(level, radius), &classes)
        })
        .collect()
}

fn ratio_report(meta: &Meta, classes: &[Option<SaddleClass>]) -> Result<RatioReport> {
    let ok: Vec<SaddleClass> = classes.iter().flatten().copied().collect();
    let ind = |c: SaddleClass| -> Vec<f64> { ok.iter().map(|&x| f64::from(u8::from(x == c))).collect() };
    let p_lower = EstimateWithCI::from_values("p_lower", meta, &ind(SaddleClass::LowerConnected))?;
    let p_upper = EstimateWithCI::from_values("p_upper", meta, &ind(SaddleClass::UpperConnected))?;
    let mut p_fourarm = EstimateWithCI::from_values("p_fourarm", meta, &ind(SaddleClass::FourArmInR))?;
    // the classes partition the classified draws
    p_fourarm.value = 1.0 - (p_lower.value + p_upper.value);
    Ok(RatioReport {
        level: meta.level,
        p_lower,
        p_upper,
        p_fourarm,
        failures: classes.len() - ok.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DerivativeEstimate {
    /// Mean of `(N_ES(l + delta) - N_ES(l)) / (pi R^2 delta)` on common draws.
    pub paired: EstimateWithCI,
    /// Standard error the same data would give if the two levels were
    /// treated as independent samples.
    pub unpaired_std_error: f64,
}

pub fn estimate_derivative_sign(
    model: &IsotropicModel,
    level: f64,
    delta: f64,
    radius: f64,
    spacing: f64,
    mc: &McConfig,
) -> Result<DerivativeEstimate> {
    if !(0.02..=0.2).contains(&delta) {
        return Err(Error::invalid(format!("delta = {delta} is outside [0.02, 0.2]")));
    }
    mc.check()?;
    require_scale(model, radius)?;
    let counts = component_counts(model, &[level, level + delta], radius, spacing, mc)?;
    let scale = area(radius) * delta;
    let lo: Vec<f64> = counts.iter().map(|c| c[0].0 as f64 / scale).collect();
    let hi: Vec<f64> = counts.iter().map(|c| c[1].0 as f64 / scale).collect();
    let diff: Vec<f64> = hi.iter().zip(&lo).map(|(a, b)| a - b).collect();
    let meta = Meta::new(model, level, radius, spacing, mc);
    let paired = EstimateWithCI::from_values("dc_es", &meta, &diff)?;
    let (_, se_lo) = mean_and_se(&lo)?;
    let (_, se_hi) = mean_and_se(&hi)?;
    Ok(DerivativeEstimate {
        paired,
        unpaired_std_error: se_lo.hypot(se_hi),
    })
}

/// One-sided 1% two-sample Kolmogorov-Smirnov critical value.
pub fn ks_one_sided_critical(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    (-(0.01f64).ln() / 2.0 * (n + m) / (n * m)).sqrt()
}

/// Two-sided 1% two-sample Kolmogorov-Smirnov critical value.
pub fn ks_two_sided_critical(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    1.6276 * ((n + m) / (n * m)).sqrt()
}

/// `sup_c [F_a(c) - F_b(c)]` over the pooled sample.
pub fn ks_one_sided(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut best) = (0, 0, 0.0f64);
    while i < a.len() || j < b.len() {
        let c = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= c {
            i += 1;
        }
        while j < b.len() && b[j] <= c {
            j += 1;
        }
        best = best.max(i as f64 / a.len() as f64 - j as f64 / b.len() as f64);
    }
    best
}

/// `sup_c |F_a(c) - F_b(c)|`.
pub fn ks_two_sided(a: &[f64], b: &[f64]) -> f64 {
    ks_one_sided(a, b).max(ks_one_sided(b, a))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DominanceRow {
    pub point: [f64; 2],
    pub statistic: f64,
    pub critical_value: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DominanceReport {
    pub level1: f64,
    pub level2: f64,
    pub rows: Vec<DominanceRow>,
    pub passed: bool,
}

/// Grid just large enough to hold `points`.
fn point_grid(points: &[[f64; 2]]) -> Result<GridSpec> {
    let r = points.iter().map(|p| p[0].abs().max(p[1].abs())).fold(0.0, f64::max);
    if !r.is_finite() {
        return Err(Error::invalid("points must be finite"));
    }
    GridSpec::new(r.max(1.0) + 0.5, 0.1)
}

/// Values `f~_l(t) - l` at each point, one row per draw.
fn shifted_values(cs: &ConditionalSampler, level: f64, points: &[[f64; 2]], mc: &McConfig, offset: u64) -> Result<Vec<Vec<f64>>> {
    let saddle = cs.saddle_sampler(level)?;
    mc.map(offset, |_, seed| {
        let field = cs.draw_seeded(&saddle, seed)?;
        Ok(points.iter().map(|&t| field.partial(t, &[]) - level).collect())
    })
}

/// Compares the laws of `f~_{l1}(t) - l1` and `f~_{l2}(t) - l2` point by
/// point: dominance holds when `F_{l1} <= F_{l2}` up to the one-sided 1%
/// Kolmogorov-Smirnov slack.
pub fn check_stochastic_dominance(
    model: &IsotropicModel,
    points: &[[f64; 2]],
    level1: f64,
    level2: f64,
    mc: &McConfig,
) -> Result<DominanceReport> {
    mc.check()?;
    if level1 > level2 {
        return Err(Error::invalid(format!("need level1 <= level2, got {level1} > {level2}")));
    }
    if points.is_empty() || points.iter().any(|p| p[0] == 0.0 && p[1] == 0.0) {
        return Err(Error::invalid("points must be non-empty and avoid the origin"));
    }
    let cs = ConditionalSampler::new(model, point_grid(points)?, mc.params)?;
    let a = shifted_values(&cs, level1, points, mc, 0)?;
    let b = shifted_values(&cs, level2, points, mc, mc.n_reps as u64)?;
    let crit = ks_one_sided_critical(mc.n_reps, mc.n_reps);
    let rows: Vec<DominanceRow> = points
        .iter()
        .enumerate()
        .map(|(k, &point)| {
            let xa: Vec<f64> = a.iter().map(|r| r[k]).collect();
            let xb: Vec<f64> = b.iter().map(|r| r[k]).collect();
            let statistic = ks_one_sided(&xa, &xb);
            DominanceRow {
                point,
                statistic,
                critical_value: crit,
                passed: statistic <= crit,
            }
        })
        .collect();
    Ok(DominanceReport {
        level1,
        level2,
        passed: rows.iter().all(|r| r.passed),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KsReport {
    pub statistic: f64,
    pub critical_value: f64,
    pub passed: bool,
}

/// Two-sided 1% KS comparison of `f~_l(t)` with `-f~_{-l}(t)`.
pub fn check_sign_symmetry(model: &IsotropicModel, level: f64, point: [f64; 2], mc: &McConfig) -> Result<KsReport> {
    mc.check()?;
    let cs = ConditionalSampler::new(model, point_grid(&[point])?, mc.params)?;
    let a: Vec<f64> = shifted_values(&cs, level, &[point], mc, 0)?.iter().map(|r| r[0] + level).collect();
    let b: Vec<f64> = shifted_values(&cs, -level, &[point], mc, mc.n_reps as u64)?
        .iter()
        .map(|r| -(r[0] - level))
        .collect();
    let statistic = ks_two_sided(&a, &b);
    let critical_value = ks_two_sided_critical(a.len(), b.len());
    Ok(KsReport {
        statistic,
        critical_value,
        passed: statistic <= critical_value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentityRow {
    pub level: f64,
    pub c_es: EstimateWithCI,
    pub c_es_neg: EstimateWithCI,
    pub c_ls: EstimateWithCI,
    /// Per-draw `c_LS(l) - c_ES(l) - c_ES(-l)`.
    pub ls_gap: EstimateWithCI,
    pub ls_passed: bool,
    /// Per-draw `(N_ES(l) - N_ES(-l)) / (pi R^2)`.
    pub euler: EstimateWithCI,
    pub h: f64,
    pub euler_passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentityReport {
    pub rows: Vec<IdentityRow>,
    pub passed: bool,
}

/// Relative discretization allowance on the Euler identity.
pub const EULER_REL_ALLOWANCE: f64 = 0.02;
/// Absolute discretization allowance on the Euler identity.
pub const EULER_ABS_ALLOWANCE: f64 = 1e-3;

/// Checks `c_LS(l) = c_ES(l) + c_ES(-l)` and `c_ES(l) - c_ES(-l) = h(l)` on
/// a symmetric level grid.
pub fn verify_level_identities(
    model: &IsotropicModel,
    levels: &[f64],
    radius: f64,
    spacing: f64,
    mc: &McConfig,
) -> Result<IdentityReport> {
    mc.check()?;
    require_scale(model, radius)?;
    let find = |x: f64| levels.iter().position(|&l| (l - x).abs() <= 1e-12);
    let mirror: Vec<usize> = levels
        .iter()
        .map(|&l| find(-l).ok_or_else(|| Error::invalid(format!("level grid is not symmetric: -{l} is missing"))))
        .collect::<Result<_>>()?;
    let counts = component_counts(model, levels, radius, spacing, mc)?;
    let meta = Meta::new(model, 0.0, radius, spacing, mc);
    let a = area(radius);
    let mut rows = Vec::new();
    for (k, &l) in levels.iter().enumerate() {
        if l < 0.0 {
            continue;
        }
        let m = &meta.at(l, radius);
        let col = |f: &dyn Fn(&Vec<(usize, usize)>) -> f64| -> Vec<f64> { counts.iter().map(f).collect() };
        let km = mirror[k];
        let c_es = EstimateWithCI::from_values("c_es", m, &col(&|c| c[k].0 as f64 / a))?;
        let c_es_neg = EstimateWithCI::from_values("c_es_neg", m, &col(&|c| c[km].0 as f64 / a))?;
        let c_ls = EstimateWithCI::from_values("c_ls", m, &col(&|c| c[k].1 as f64 / a))?;
        let ls_gap = EstimateWithCI::from_values(
            "ls_gap",
            m,
            &col(&|c| (c[k].1 as f64 - c[k].0 as f64 - c[km].0 as f64) / a),
        )?;
        let euler = EstimateWithCI::from_values("euler", m, &col(&|c| (c[k].0 as f64 - c[km].0 as f64) / a))?;
        let h = crate::critdens::euler_density_h(model, l);
        let ls_passed = ls_gap.value.abs() <= 3.0 * ls_gap.std_error;
        let euler_passed =
            (euler.value - h).abs() <= 3.0 * euler.std_error + EULER_REL_ALLOWANCE * h.abs() + EULER_ABS_ALLOWANCE;
        rows.push(IdentityRow {
            level: l,
            c_es,
            c_es_neg,
            c_ls,
            ls_gap,
            ls_passed,
            euler,
            h,
            euler_passed,
        });
    }
    Ok(IdentityReport {
        passed: rows.iter().all(|r| r.ls_passed && r.euler_passed),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmDecay {
    pub inner_radius: f64,
    /// `P(Arm(r, R))` per outer radius, in the order given.
    pub rows: Vec<EstimateWithCI>,
    /// Least-squares slope of `ln p` against `ln(R / r)`.
    pub slope: f64,
}

/// One-arm probabilities for each outer radius on common draws.
pub fn estimate_arm_decay(
    model: &IsotropicModel,
    level: f64,
    inner: f64,
    radii: &[f64],
    spacing: f64,
    mc: &McConfig,
) -> Result<ArmDecay> {
    mc.check()?;
    let big = radii.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if radii.is_empty() || radii.iter().any(|&r| !(r > inner)) {
        return Err(Error::invalid(format!("every outer radius must exceed r = {inner}")));
    }
    let sampler = FieldSampler::new(model, GridSpec::new(big, spacing)?, mc.params)?;
    let hits = mc.map(0, |_, seed| {
        let s = sampler.draw_seeded(seed);
        radii.iter().map(|&r| arm_event(&s, level, inner, r)).collect::<Result<Vec<bool>>>()
    })?;
    let meta = Meta::new(model, level, 0.0, spacing, mc);
    let rows: Vec<EstimateWithCI> = radii
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            let v: Vec<f64> = hits.iter().map(|h| f64::from(u8::from(h[k]))).collect();
            EstimateWithCI::from_values("p_arm", &meta.at(level, r), &v)
        })
        .collect::<Result<_>>()?;
    if rows.iter().any(|r| r.value == 0.0) || rows.iter().all(|r| r.value == 1.0) {
        return Err(Error::DegenerateFit("arm probabilities are all one or include zero".into()));
    }
    let xs: Vec<f64> = radii.iter().map(|r| (r / inner).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.value.ln()).collect();
    let slope = least_squares_slope(&xs, &ys).ok_or_else(|| Error::DegenerateFit("a single outer radius gives no slope".into()))?;
    Ok(ArmDecay {
        inner_radius: inner,
        rows,
        slope,
    })
}

fn least_squares_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = compensated_sum(x.iter().copied()) / n;
    let my = compensated_sum(y.iter().copied()) / n;
    let sxx = compensated_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let sxy = compensated_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FourArmFraction {
    /// Fraction of classified conditional saddles that are four-arm in
    /// `B(R)`, per radius.
    pub rows: Vec<EstimateWithCI>,
    /// Unclassifiable draws per radius.
    pub failures: Vec<usize>,
}

/// Four-arm fraction of conditional saddles at each classification radius,
/// on common draws.
pub fn estimate_fourarm_fraction(
    model: &IsotropicModel,
    level: f64,
    radii: &[f64],
    spacing: f64,
    mc: &McConfig,
) -> Result<FourArmFraction> {
    mc.check()?;
    let big = radii.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if radii.is_empty() || !(big > 0.0) {
        return Err(Error::invalid("need at least one positive radius"));
    }
    let cs = ConditionalSampler::new(model, GridSpec::new(big, spacing)?, mc.params)?;
    let saddle = cs.saddle_sampler(level)?;
    let classes = mc.map(0, |_, seed| {
        let field = cs.draw_seeded(&saddle, seed)?;
        radii
            .iter()
            .map(|&r| match classify_saddle_at_origin(&field.sample, r, None) {
                Ok(c) => Ok(Some(c.class)),
                Err(Error::EpsilonTooLarge { .. } | Error::BothJoined { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let meta = Meta::new(model, level, 0.0, spacing, mc);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (k, &r) in radii.iter().enumerate() {
        let v: Vec<f64> = classes
            .iter()
            .filter_map(|c| c[k])
            .map(|c| f64::from(u8::from(c == SaddleClass::FourArmInR)))
            .collect();
        failures.push(classes.len() - v.len());
        rows.push(EstimateWithCI::from_values("p_fourarm", &meta.at(level, r), &v)?);
    }
    Ok(FourArmFraction { rows, failures })
}

/// Density of four-arm saddles with level in `band` in unconditional draws:
/// saddles in `B(R)` that are four-arm within `B(s, arm_radius)`.
pub fn estimate_fourarm_count(
    model: &IsotropicModel,
    band: (f64, f64),
    radius: f64,
    arm_radius: f64,
    spacing: f64,
    mc: &McConfig,
) -> Result<EstimateWithCI> {
    mc.check()?;
    let sampler = FieldSampler::new(model, GridSpec::new(radius + arm_radius, spacing)?, mc.params)?;
    let counts = mc.map(0, |_, seed| {
        let s = sampler.draw_seeded(seed);
        count_four_arm_saddles(&s, radius, arm_radius, band).map(|c| c.count as f64 / area(radius))
    })?;
    let meta = Meta::new(model, band.0, radius, spacing, mc);
    EstimateWithCI::from_values("fourarm_density", &meta, &counts)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriticalCounts {
    pub maxima: EstimateWithCI,
    pub minima: EstimateWithCI,
    pub saddles: EstimateWithCI,
    pub window_area: f64,
    /// Newton failures summed over draws.
    pub diagnostics: usize,
}

/// Mean numbers of critical points per draw in the square `[-a, a]^2` with
/// level in `band`.
pub fn estimate_critical_counts(
    model: &IsotropicModel,
    half_width: f64,
    band: (f64, f64),
    spacing: f64,
    mc: &McConfig,
) -> Result<CriticalCounts> {
    mc.check()?;
    let sampler = FieldSampler::new(model, GridSpec::new(half_width, spacing)?, mc.params)?;
    let window = Window::Square(half_width);
    let per = mc.map(0, |_, seed| {
        let s = sampler.draw_seeded(seed);
        let scan = find_critical_points(&s, window, band)?;
        let count = |k: CritKind| scan.points.iter().filter(|p| p.kind == k).count() as f64;
        Ok([count(CritKind::Max), count(CritKind::Min), count(CritKind::Saddle), scan.diagnostics.len() as f64])
    })?;
    let meta = Meta::new(model, band.0, half_width, spacing, mc);
    let col = |k: usize| -> Vec<f64> { per.iter().map(|r| r[k]).collect() };
    Ok(CriticalCounts {
        maxima: EstimateWithCI::from_values("n_max", &meta, &col(0))?,
        minima: EstimateWithCI::from_values("n_min", &meta, &col(1))?,
        saddles: EstimateWithCI::from_values("n_saddle", &meta, &col(2))?,
        window_area: window.area(),
        diagnostics: per.iter().map(|r| r[3] as usize).sum(),
    })
}
