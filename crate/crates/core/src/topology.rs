//! Component counts of excursion and level sets on sampled grids, critical
//! point detection, saddle connectivity classification, arm events and
//! four-arm saddle counts.
//!
//! `{f >= l}` is labelled with 4-connectivity and `{f < l}` with
//! 8-connectivity, so that a grid cut can never be crossed by both phases.
//! A component lies inside `B(R)` when all its nodes (by node centre) do.

use std::collections::{HashMap, VecDeque};
use std::f64::consts::PI;
use std::io::Write;

use serde::Serialize;

use crate::critdens::CritKind;
use crate::error::{Error, Result};
use crate::sampler::{FieldSample, SampleKind};

/// Disjoint sets with path halving and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] as usize != x {
            let p = self.parent[x] as usize;
            self.parent[x] = self.parent[p];
            x = self.parent[x] as usize;
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> usize {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return ra;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra as u32;
        self.size[ra] += self.size[rb];
        ra
    }

    pub fn component_size(&mut self, x: usize) -> usize {
        let r = self.find(x);
        self.size[r] as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    /// Neighbours already visited in a row-major sweep.
    fn back_neighbours(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(0, -1), (-1, 0)],
            Connectivity::Eight => &[(0, -1), (-1, -1), (-1, 0), (-1, 1)],
        }
    }

    fn neighbours(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(0, -1), (-1, 0), (0, 1), (1, 0)],
            Connectivity::Eight => &[(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)],
        }
    }

    fn other(self) -> Self {
        match self {
            Connectivity::Four => Connectivity::Eight,
            Connectivity::Eight => Connectivity::Four,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopologyReport {
    pub level: f64,
    pub radius: f64,
    /// Components of `{f >= level}` inside `B(R)`.
    pub n_es: usize,
    /// Components of `{f < level}` inside `B(R)`.
    pub n_sub: usize,
    /// Level-set components inside `B(R)`, counted as `n_es + n_sub`.
    pub n_ls: usize,
    /// Excursion components meeting the boundary of `B(R)`.
    pub n_es_touching: usize,
    pub connectivity: Connectivity,
    /// Set when at least 0.1% of the labelled values equal the level; the
    /// level is then raised by `LEVEL_JITTER` before thresholding.
    pub degenerate_level: bool,
}

pub const LEVEL_JITTER: f64 = 1e-9;
const DEGENERATE_FRACTION: f64 = 1e-3;

/// Grid nodes of a sample within a disc, as a square box of nodes.
struct DiscBox<'a> {
    sample: &'a FieldSample,
    /// Box origin (row, col) in the sample and side length.
    i0: usize,
    j0: usize,
    side: usize,
    center: [f64; 2],
}

impl<'a> DiscBox<'a> {
    fn new(sample: &'a FieldSample, center: [f64; 2], radius: f64) -> Result<Self> {
        let g = &sample.grid;
        let h = g.spacing;
        let m = g.half_nodes() as f64;
        let n = sample.side();
        let lo_j = ((center[0] - radius) / h + m).floor() - 1.0;
        let hi_j = ((center[0] + radius) / h + m).ceil() + 1.0;
        let lo_i = ((center[1] - radius) / h + m).floor() - 1.0;
        let hi_i = ((center[1] + radius) / h + m).ceil() + 1.0;
        if lo_j < 0.0 || lo_i < 0.0 || hi_j > (n - 1) as f64 || hi_i > (n - 1) as f64 {
            return Err(Error::invalid(format!(
                "disc of radius {radius} around {center:?} does not fit in the sampled square of half-width {}",
                g.extent()
            )));
        }
        let side = (hi_j - lo_j).max(hi_i - lo_i) as usize + 1;
        Ok(DiscBox {
            sample,
            i0: lo_i as usize,
            j0: lo_j as usize,
            side: side.min(n - lo_i as usize).min(n - lo_j as usize),
            center,
        })
    }

    fn dist(&self, bi: usize, bj: usize) -> f64 {
        let g = &self.sample.grid;
        let x = g.coord(self.j0 + bj) - self.center[0];
        let y = g.coord(self.i0 + bi) - self.center[1];
        x.hypot(y)
    }

    fn value(&self, bi: usize, bj: usize) -> f64 {
        self.sample.at(self.i0 + bi, self.j0 + bj)
    }
}

pub fn count_components(sample: &FieldSample, level: f64, radius: f64) -> Result<TopologyReport> {
    count_components_with(sample, level, radius, Connectivity::Four)
}

/// As [`count_components`], with the excursion phase labelled with
/// `excursion` connectivity and the complement with the other one.
pub fn count_components_with(
    sample: &FieldSample,
    level: f64,
    radius: f64,
    excursion: Connectivity,
) -> Result<TopologyReport> {
    if !(radius > 0.0) || !level.is_finite() {
        return Err(Error::invalid("radius must be positive and level finite"));
    }
    let (comps, degenerate_level) = label_components(sample, level, radius, excursion)?;
    let count = |upper: bool, touching: bool| comps.iter().filter(|c| c.upper == upper && c.touching == touching).count();
    let (n_es, n_sub) = (count(true, false), count(false, false));
    Ok(TopologyReport {
        level,
        radius,
        n_es,
        n_sub,
        n_ls: n_es + n_sub,
        n_es_touching: count(true, true),
        connectivity: excursion,
        degenerate_level,
    })
}

/// Edge-corrected counts: components labelled over `B(R + margin)` that do
/// not reach its boundary, counted when their first node in raster order
/// lies in `B(R)`. By stationarity the mean count is the component density
/// times the area of `B(R)`, up to components wider than the margin.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnchoredCounts {
    pub level: f64,
    pub radius: f64,
    pub margin: f64,
    pub n_es: usize,
    pub n_sub: usize,
    pub n_ls: usize,
    pub degenerate_level: bool,
}

pub fn count_components_anchored(sample: &FieldSample, level: f64, radius: f64, margin: f64) -> Result<AnchoredCounts> {
    if !(radius > 0.0 && margin >= 0.0) || !level.is_finite() {
        return Err(Error::invalid("radius must be positive, margin non-negative and level finite"));
    }
    let (comps, degenerate_level) = label_components(sample, level, radius + margin, Connectivity::Four)?;
    let count =
        |upper: bool| comps.iter().filter(|c| c.upper == upper && !c.touching && c.anchor_dist < radius).count();
    let (n_es, n_sub) = (count(true), count(false));
    Ok(AnchoredCounts {
        level,
        radius,
        margin,
        n_es,
        n_sub,
        n_ls: n_es + n_sub,
        degenerate_level,
    })
}

struct Component {
    upper: bool,
    /// Has a node at distance `>= ring` from the origin.
    touching: bool,
    /// Distance of the component's first node in raster order.
    anchor_dist: f64,
}

/// Labels both phases on the nodes with `|x| < ring + 1.5h`.
fn label_components(
    sample: &FieldSample,
    level: f64,
    ring: f64,
    excursion: Connectivity,
) -> Result<(Vec<Component>, bool)> {
    let h = sample.grid.spacing;
    let outer = ring + 1.5 * h;
    let b = DiscBox::new(sample, [0.0, 0.0], outer)?;
    let side = b.side;
    let mut dist = vec![f64::INFINITY; side * side];
    let mut ties = 0usize;
    let mut total = 0usize;
    for bi in 0..side {
        for bj in 0..side {
            let d = b.dist(bi, bj);
            if d < outer {
                dist[bi * side + bj] = d;
                total += 1;
                if b.value(bi, bj) == level {
                    ties += 1;
                }
            }
        }
    }
    let degenerate_level = ties as f64 >= DEGENERATE_FRACTION * total as f64;
    let lv = if degenerate_level { level + LEVEL_JITTER } else { level };
    let mut phase = vec![false; side * side];
    for bi in 0..side {
        for bj in 0..side {
            phase[bi * side + bj] = b.value(bi, bj) >= lv;
        }
    }

    let mut uf = UnionFind::new(side * side);
    for bi in 0..side {
        for bj in 0..side {
            let k = bi * side + bj;
            if !(dist[k] < outer) {
                continue;
            }
            let conn = if phase[k] { excursion } else { excursion.other() };
            for &(di, dj) in conn.back_neighbours() {
                let (ni, nj) = (bi as isize + di, bj as isize + dj);
                if ni < 0 || nj < 0 || nj >= side as isize {
                    continue;
                }
                let nk = ni as usize * side + nj as usize;
                if dist[nk] < outer && phase[nk] == phase[k] {
                    uf.union(k, nk);
                }
            }
        }
    }
    // root -> index into comps
    let mut slot = vec![usize::MAX; side * side];
    let mut comps: Vec<Component> = Vec::new();
    for k in 0..side * side {
        if !(dist[k] < outer) {
            continue;
        }
        let r = uf.find(k);
        if slot[r] == usize::MAX {
            slot[r] = comps.len();
            comps.push(Component {
                upper: phase[k],
                touching: false,
                anchor_dist: dist[k],
            });
        }
        if dist[k] >= ring {
            comps[slot[r]].touching = true;
        }
    }
    Ok((comps, degenerate_level))
}

/// Bicubic Hermite interpolant of a sample with central-difference node
/// derivatives.
pub struct Bicubic<'a> {
    sample: &'a FieldSample,
}

/// Value, gradient and Hessian `(f, fx, fy, fxx, fyy, fxy)`.
pub type Jet = [f64; 6];

impl<'a> Bicubic<'a> {
    pub fn new(sample: &'a FieldSample) -> Self {
        Bicubic { sample }
    }

    fn node(&self, i: usize, j: usize) -> [f64; 4] {
        let s = self.sample;
        let f = s.at(i, j);
        let fx = 0.5 * (s.at(i, j + 1) - s.at(i, j - 1));
        let fy = 0.5 * (s.at(i + 1, j) - s.at(i - 1, j));
        let fxy = 0.25 * (s.at(i + 1, j + 1) - s.at(i + 1, j - 1) - s.at(i - 1, j + 1) + s.at(i - 1, j - 1));
        [f, fx, fy, fxy]
    }

    /// Jet at `(x, y)`; `None` where the 4x4 stencil leaves the grid.
    pub fn jet(&self, x: f64, y: f64) -> Option<Jet> {
        let g = &self.sample.grid;
        let h = g.spacing;
        let m = g.half_nodes() as f64;
        let n = self.sample.side();
        let (u, v) = (x / h + m, y / h + m);
        if !(u >= 1.0 && v >= 1.0 && u <= (n - 2) as f64 && v <= (n - 2) as f64) {
            return None;
        }
        let j = (u.floor() as usize).min(n - 3);
        let i = (v.floor() as usize).min(n - 3);
        let (s, t) = (u - j as f64, v - i as f64);
        // corners indexed [dx][dy]
        let c = [[self.node(i, j), self.node(i + 1, j)], [self.node(i, j + 1), self.node(i + 1, j + 1)]];
        let fm = |k: usize| [[c[0][0][k], c[0][1][k]], [c[1][0][k], c[1][1][k]]];
        let (f, fx, fy, fxy) = (fm(0), fm(1), fm(2), fm(3));
        let big = [
            [f[0][0], f[0][1], fy[0][0], fy[0][1]],
            [f[1][0], f[1][1], fy[1][0], fy[1][1]],
            [fx[0][0], fx[0][1], fxy[0][0], fxy[0][1]],
            [fx[1][0], fx[1][1], fxy[1][0], fxy[1][1]],
        ];
        const M: [[f64; 4]; 4] = [[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [-3.0, 3.0, -2.0, -1.0], [2.0, -2.0, 1.0, 1.0]];
        let mut tmp = [[0.0; 4]; 4];
        for p in 0..4 {
            for q in 0..4 {
                tmp[p][q] = (0..4).map(|k| M[p][k] * big[k][q]).sum();
            }
        }
        let mut a = [[0.0; 4]; 4];
        for p in 0..4 {
            for q in 0..4 {
                a[p][q] = (0..4).map(|k| tmp[p][k] * M[q][k]).sum();
            }
        }
        let pw = |z: f64| [1.0, z, z * z, z * z * z];
        let dpw = |z: f64| [0.0, 1.0, 2.0 * z, 3.0 * z * z];
        let ddpw = |z: f64| [0.0, 0.0, 2.0, 6.0 * z];
        let (su, du, ddu) = (pw(s), dpw(s), ddpw(s));
        let (sv, dv, ddv) = (pw(t), dpw(t), ddpw(t));
        let mut out = [0.0; 6];
        for p in 0..4 {
            for q in 0..4 {
                let a = a[p][q];
                out[0] += a * su[p] * sv[q];
                out[1] += a * du[p] * sv[q];
                out[2] += a * su[p] * dv[q];
                out[3] += a * ddu[p] * sv[q];
                out[4] += a * su[p] * ddv[q];
                out[5] += a * du[p] * dv[q];
            }
        }
        Some([out[0], out[1] / h, out[2] / h, out[3] / (h * h), out[4] / (h * h), out[5] / (h * h)])
    }

    pub fn value(&self, x: f64, y: f64) -> Option<f64> {
        self.jet(x, y).map(|j| j[0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CriticalPoint {
    pub position: [f64; 2],
    pub level: f64,
    pub kind: CritKind,
    /// `(fxx, fyy, fxy)` of the interpolant at the point.
    pub hessian: [f64; 3],
}

impl CriticalPoint {
    /// Angle of the eigenvector of the most negative Hessian eigenvalue.
    pub fn negative_direction(&self) -> f64 {
        let [a, d, b] = self.hessian;
        // eigenvector of the smaller eigenvalue of [[a, b], [b, d]]
        0.5 * (2.0 * b).atan2(a - d) + 0.5 * PI
    }

    pub fn eigenvalues(&self) -> (f64, f64) {
        let [a, d, b] = self.hessian;
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        (mid - rad, mid + rad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NewtonFailure {
    /// Lower-left node `(row, col)` of the flagged cell.
    pub cell: (usize, usize),
    pub last_position: [f64; 2],
    pub gradient_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriticalPointScan {
    pub points: Vec<CriticalPoint>,
    pub diagnostics: Vec<NewtonFailure>,
}

/// Region scanned for critical points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Window {
    /// `[-a, a]^2`
    Square(f64),
    /// Disc of this radius around the origin.
    Disc(f64),
}

impl Window {
    fn half_width(self) -> f64 {
        match self {
            Window::Square(a) | Window::Disc(a) => a,
        }
    }

    fn contains(self, p: [f64; 2]) -> bool {
        match self {
            Window::Square(a) => p[0].abs() <= a && p[1].abs() <= a,
            Window::Disc(r) => p[0].hypot(p[1]) <= r,
        }
    }

    pub fn area(self) -> f64 {
        match self {
            Window::Square(a) => 4.0 * a * a,
            Window::Disc(r) => PI * r * r,
        }
    }
}

const NEWTON_MAX_ITER: usize = 30;
const NEWTON_TOL: f64 = 1e-10;

/// Critical points of the bicubic interpolant with level in the open band
/// `(a, b)` inside the window.
pub fn find_critical_points(sample: &FieldSample, window: Window, band: (f64, f64)) -> Result<CriticalPointScan> {
    let g = &sample.grid;
    let h = g.spacing;
    let m = g.half_nodes();
    let w = window.half_width();
    if !(w > 0.0) || w + 4.0 * h > g.extent() {
        return Err(Error::invalid(format!(
            "window half-width {w} must be positive and at least 4h inside the sampled half-width {}",
            g.extent()
        )));
    }
    let n = sample.side();
    // node gradients by central differences on the nodes the stencils touch
    let k = ((w / h).ceil() as usize + 2).min(m - 2);
    let (lo, hi) = (m - k, m + k);
    let mut gx = vec![0.0; n * n];
    let mut gy = vec![0.0; n * n];
    for i in lo - 1..=hi + 1 {
        for j in lo - 1..=hi + 1 {
            gx[i * n + j] = sample.at(i, j + 1) - sample.at(i, j - 1);
            gy[i * n + j] = sample.at(i + 1, j) - sample.at(i - 1, j);
        }
    }
    let interp = Bicubic::new(sample);
    let mut points: Vec<CriticalPoint> = Vec::new();
    let mut diagnostics = Vec::new();
    let mut hash: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let bucket = 0.25 * h;
    for i in lo..hi {
        for j in lo..hi {
            let (mut xs, mut ys) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
            for a in i - 1..=i + 2 {
                for b in j - 1..=j + 2 {
                    let (u, v) = (gx[a * n + b], gy[a * n + b]);
                    xs = (xs.0.min(u), xs.1.max(u));
                    ys = (ys.0.min(v), ys.1.max(v));
                }
            }
            if !(xs.0 <= 0.0 && xs.1 >= 0.0 && ys.0 <= 0.0 && ys.1 >= 0.0) {
                continue;
            }
            let start = [g.coord(j) + 0.5 * h, g.coord(i) + 0.5 * h];
            let mut p = start;
            let mut result = None;
            let mut gnorm = f64::INFINITY;
            for _ in 0..NEWTON_MAX_ITER {
                let Some(jt) = interp.jet(p[0], p[1]) else { break };
                gnorm = jt[1].hypot(jt[2]);
                if gnorm < NEWTON_TOL {
                    result = Some(jt);
                    break;
                }
                let det = jt[3] * jt[4] - jt[5] * jt[5];
                if det == 0.0 || !det.is_finite() {
                    break;
                }
                let dx = (jt[4] * jt[1] - jt[5] * jt[2]) / det;
                let dy = (jt[3] * jt[2] - jt[5] * jt[1]) / det;
                p = [p[0] - dx, p[1] - dy];
                if (p[0] - start[0]).abs() > 2.0 * h || (p[1] - start[1]).abs() > 2.0 * h {
                    break;
                }
            }
            let Some(jt) = result else {
                // a candidate that is not near a critical point of the interpolant
                diagnostics.push(NewtonFailure {
                    cell: (i, j),
                    last_position: p,
                    gradient_norm: gnorm,
                });
                continue;
            };
            let key = ((p[0] / bucket).floor() as i64, (p[1] / bucket).floor() as i64);
            let dup = (-1..=1).any(|da| {
                (-1..=1).any(|db| {
                    hash.get(&(key.0 + da, key.1 + db)).is_some_and(|v| {
                        v.iter().any(|&q| {
                            let c = points[q].position;
                            (c[0] - p[0]).hypot(c[1] - p[1]) < bucket
                        })
                    })
                })
            });
            if dup {
                continue;
            }
            let det = jt[3] * jt[4] - jt[5] * jt[5];
            let kind = if det < 0.0 {
                CritKind::Saddle
            } else if jt[3] + jt[4] < 0.0 {
                CritKind::Max
            } else {
                CritKind::Min
            };
            hash.entry(key).or_default().push(points.len());
            points.push(CriticalPoint {
                position: p,
                level: jt[0],
                kind,
                hessian: [jt[3], jt[4], jt[5]],
            });
        }
    }
    points.retain(|c| window.contains(c.position) && c.level > band.0 && c.level < band.1);
    Ok(CriticalPointScan { points, diagnostics })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum SaddleClass {
    LowerConnected,
    UpperConnected,
    FourArmInR,
}

impl SaddleClass {
    pub fn name(self) -> &'static str {
        match self {
            SaddleClass::LowerConnected => "lower",
            SaddleClass::UpperConnected => "upper",
            SaddleClass::FourArmInR => "four-arm",
        }
    }
}

/// A saddle to classify: where it is, its level, and the direction in which
/// the field decreases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaddleSite {
    pub center: [f64; 2],
    pub level: f64,
    pub negative_direction: f64,
    /// `(negative, positive)` Hessian eigenvalues.
    pub eigenvalues: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Classification {
    pub class: SaddleClass,
    pub epsilon: f64,
}

/// Samples per circle when counting sign arcs.
const CIRCLE_SAMPLES: usize = 256;
/// Halvings of the inner radius tried after the first attempt.
const EPSILON_RETRIES: usize = 4;

/// Inner radius: `max(4h, min(0.5, 0.1 min(|l1|, l2) / C))`, with `C` the
/// largest interpolated Hessian norm on `B(center, 1)` sampled on nodes.
pub fn default_epsilon(sample: &FieldSample, site: &SaddleSite) -> f64 {
    let h = sample.grid.spacing;
    let interp = Bicubic::new(sample);
    let mut c2: f64 = 0.0;
    let k = (1.0 / h).ceil() as i64;
    for a in -k..=k {
        for b in -k..=k {
            let (x, y) = (site.center[0] + b as f64 * h, site.center[1] + a as f64 * h);
            if (x - site.center[0]).hypot(y - site.center[1]) > 1.0 {
                continue;
            }
            if let Some(j) = interp.jet(x, y) {
                c2 = c2.max((j[3] * j[3] + j[4] * j[4] + 2.0 * j[5] * j[5]).sqrt());
            }
        }
    }
    let lam = site.eigenvalues.0.abs().min(site.eigenvalues.1.abs());
    let eps = if c2 > 0.0 { (0.1 * lam / c2).min(0.5) } else { 0.5 };
    eps.max(4.0 * h)
}

/// Classifies a saddle by flood-filling both phases of the annulus
/// `B(c, R) \ B(c, epsilon)` from seeds on the four sign arcs.
pub fn classify_saddle(sample: &FieldSample, site: &SaddleSite, radius: f64, epsilon: Option<f64>) -> Result<Classification> {
    let h = sample.grid.spacing;
    let mut eps = match epsilon {
        Some(e) if e < 4.0 * h => {
            return Err(Error::invalid(format!("epsilon {e} is below 4h = {}", 4.0 * h)));
        }
        Some(e) => e,
        None => default_epsilon(sample, site),
    };
    if !(radius > eps) {
        return Err(Error::invalid(format!("radius {radius} must exceed epsilon {eps}")));
    }
    let b = DiscBox::new(sample, site.center, radius)?;
    let interp = Bicubic::new(sample);
    let mut last_arcs = 0;
    for attempt in 0..=EPSILON_RETRIES {
        if attempt > 0 {
            eps *= 0.5;
            if eps < 2.0 * h {
                break;
            }
        }
        match arcs_and_seeds(&b, &interp, site, eps, radius)? {
            Ok(seeds) => {
                let class = flood_classify(&b, site, eps, radius, &seeds)?;
                return Ok(Classification { class, epsilon: eps });
            }
            Err(arcs) => last_arcs = arcs,
        }
    }
    Err(Error::EpsilonTooLarge {
        arcs: last_arcs,
        epsilon: eps.max(2.0 * h),
    })
}

/// Box indices of the seeds `[neg, neg, pos, pos]`, or the number of arcs
/// seen when the circle does not show the expected four.
#[allow(clippy::type_complexity)]
fn arcs_and_seeds(
    b: &DiscBox,
    interp: &Bicubic,
    site: &SaddleSite,
    eps: f64,
    radius: f64,
) -> Result<std::result::Result<[(usize, usize); 4], usize>> {
    let c = site.center;
    let sign_at = |phi: f64| -> Result<bool> {
        let (x, y) = (c[0] + eps * phi.cos(), c[1] + eps * phi.sin());
        interp
            .value(x, y)
            .map(|v| v >= site.level)
            .ok_or_else(|| Error::invalid("classification circle leaves the interpolable grid"))
    };
    let signs = (0..CIRCLE_SAMPLES)
        .map(|k| sign_at(2.0 * PI * k as f64 / CIRCLE_SAMPLES as f64))
        .collect::<Result<Vec<bool>>>()?;
    let changes = (0..CIRCLE_SAMPLES)
        .filter(|&k| signs[k] != signs[(k + 1) % CIRCLE_SAMPLES])
        .count();
    if changes != 4 {
        return Ok(Err(changes));
    }
    let th = site.negative_direction;
    let dirs = [th, th + PI, th + 0.5 * PI, th - 0.5 * PI];
    let want = [false, false, true, true];
    for (d, w) in dirs.iter().zip(want) {
        if sign_at(*d)? != w {
            return Ok(Err(changes));
        }
    }
    let h = b.sample.grid.spacing;
    let m = b.sample.grid.half_nodes() as f64;
    let mut seeds = [(0, 0); 4];
    for (k, (d, w)) in dirs.iter().zip(want).enumerate() {
        let mut found = None;
        let mut t = 0.0;
        while found.is_none() && t <= 3.0 * h {
            let (x, y) = (c[0] + (eps + t) * d.cos(), c[1] + (eps + t) * d.sin());
            let (gj, gi) = ((x / h + m).round() as isize, (y / h + m).round() as isize);
            let (bi, bj) = (gi - b.i0 as isize, gj - b.j0 as isize);
            if bi >= 0 && bj >= 0 && (bi as usize) < b.side && (bj as usize) < b.side {
                let (bi, bj) = (bi as usize, bj as usize);
                let dd = b.dist(bi, bj);
                if dd >= eps && dd < radius && (b.value(bi, bj) >= site.level) == w {
                    found = Some((bi, bj));
                }
            }
            t += 0.5 * h;
        }
        match found {
            Some(s) => seeds[k] = s,
            None => return Ok(Err(changes)),
        }
    }
    Ok(Ok(seeds))
}

fn flood_classify(b: &DiscBox, site: &SaddleSite, eps: f64, radius: f64, seeds: &[(usize, usize); 4]) -> Result<SaddleClass> {
    let side = b.side;
    let region = |bi: usize, bj: usize| {
        let d = b.dist(bi, bj);
        d >= eps && d < radius
    };
    let joins = |from: (usize, usize), to: (usize, usize), upper: bool| -> bool {
        let conn = if upper { Connectivity::Four } else { Connectivity::Eight };
        let mut seen = vec![false; side * side];
        let mut queue = VecDeque::new();
        seen[from.0 * side + from.1] = true;
        queue.push_back(from);
        while let Some((i, j)) = queue.pop_front() {
            if (i, j) == to {
                return true;
            }
            for &(di, dj) in conn.neighbours() {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni >= side as isize || nj >= side as isize {
                    continue;
                }
                let (ni, nj) = (ni as usize, nj as usize);
                let k = ni * side + nj;
                if seen[k] || !region(ni, nj) || (b.value(ni, nj) >= site.level) != upper {
                    continue;
                }
                seen[k] = true;
                queue.push_back((ni, nj));
            }
        }
        false
    };
    let lower = joins(seeds[0], seeds[1], false);
    let upper = joins(seeds[2], seeds[3], true);
    match (lower, upper) {
        (true, true) => Err(Error::BothJoined { center: site.center }),
        (true, false) => Ok(SaddleClass::LowerConnected),
        (false, true) => Ok(SaddleClass::UpperConnected),
        (false, false) => Ok(SaddleClass::FourArmInR),
    }
}

/// Classifies the saddle a conditional sample carries at the origin.
pub fn classify_saddle_at_origin(sample: &FieldSample, radius: f64, epsilon: Option<f64>) -> Result<Classification> {
    let SampleKind::Conditional { level, draw } = sample.kind else {
        return Err(Error::invalid("saddle classification needs a conditional sample"));
    };
    let site = SaddleSite {
        center: [0.0, 0.0],
        level,
        negative_direction: draw.negative_direction(),
        eigenvalues: draw.eigenvalues(level),
    };
    classify_saddle(sample, &site, radius, epsilon)
}

/// True iff a 4-connected component of `{f >= level}` has nodes in `B(r)`
/// and outside `B(R)`.
pub fn arm_event(sample: &FieldSample, level: f64, r: f64, big_r: f64) -> Result<bool> {
    if !(r > 0.0 && r < big_r) {
        return Err(Error::invalid(format!("need 0 < r < R, got r = {r}, R = {big_r}")));
    }
    let h = sample.grid.spacing;
    let outer = big_r + 1.5 * h;
    let b = DiscBox::new(sample, [0.0, 0.0], outer)?;
    let side = b.side;
    let mut seen = vec![false; side * side];
    let mut queue = VecDeque::new();
    for bi in 0..side {
        for bj in 0..side {
            if b.dist(bi, bj) < r && b.value(bi, bj) >= level {
                seen[bi * side + bj] = true;
                queue.push_back((bi, bj));
            }
        }
    }
    while let Some((i, j)) = queue.pop_front() {
        if b.dist(i, j) >= big_r {
            return Ok(true);
        }
        for &(di, dj) in Connectivity::Four.neighbours() {
            let (ni, nj) = (i as isize + di, j as isize + dj);
            if ni < 0 || nj < 0 || ni >= side as isize || nj >= side as isize {
                continue;
            }
            let (ni, nj) = (ni as usize, nj as usize);
            let k = ni * side + nj;
            if !seen[k] && b.dist(ni, nj) < outer && b.value(ni, nj) >= level {
                seen[k] = true;
                queue.push_back((ni, nj));
            }
        }
    }
    Ok(false)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FourArmCount {
    pub count: usize,
    pub saddles: usize,
    /// Saddles that could not be classified (arc or both-joined errors).
    pub failures: usize,
}

/// Saddles in `B(R)` with level in `band` that are four-arm within
/// `B(s, arm_radius)`.
pub fn count_four_arm_saddles(sample: &FieldSample, radius: f64, arm_radius: f64, band: (f64, f64)) -> Result<FourArmCount> {
    let scan = find_critical_points(sample, Window::Disc(radius), band)?;
    let mut out = FourArmCount {
        count: 0,
        saddles: 0,
        failures: 0,
    };
    for cp in scan.points.iter().filter(|c| c.kind == CritKind::Saddle) {
        out.saddles += 1;
        let site = SaddleSite {
            center: cp.position,
            level: cp.level,
            negative_direction: cp.negative_direction(),
            eigenvalues: cp.eigenvalues(),
        };
        match classify_saddle(sample, &site, arm_radius, None) {
            Ok(c) if c.class == SaddleClass::FourArmInR => out.count += 1,
            Ok(_) => {}
            Err(Error::EpsilonTooLarge { .. } | Error::BothJoined { .. }) => out.failures += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// CSV header for [`write_report_row`].
pub const REPORT_HEADER: &str = "model,seed,level,R,h,n_es,n_ls,n_touching,class";

pub fn write_report_row<W: Write>(
    mut w: W,
    sample: &FieldSample,
    report: &TopologyReport,
    class: Option<SaddleClass>,
) -> Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{},{},{},{}",
        sample.model_name,
        sample.seed,
        report.level,
        report.radius,
        sample.grid.spacing,
        report.n_es,
        report.n_ls,
        report.n_es_touching,
        class.map(|c| c.name()).unwrap_or("")
    )?;
    Ok(())
}
