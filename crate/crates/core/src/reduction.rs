//! Reduction by one-parameter symmetries: canonical forms, the gauge and time
//! factors that make a symmetry strong, triangular detection and reconstruction.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, StosymError};
use crate::linalg;
use crate::path::{CadlagPath, PathSpace, PathStyle};
use crate::sde::{solve_grid, GeometricalSde};
use crate::transform::{InfinitesimalStochasticTransformation, StochasticTransformation};

pub const CANONICAL_TOL: f64 = 1e-9;
pub const TRIANGULAR_TOL: f64 = 1e-9;
/// Fields weaker than this are treated as vanishing.
pub const REGULARITY_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalReport {
    pub canonical: bool,
    /// Largest departure from the unit upper-triangular pattern.
    pub deviation: f64,
}

/// Whether `Y_1, …, Y_r` have the form `Y_j = ∂_j + Σ_{i<j} G^i_j(x) ∂_i` at every
/// probe point, i.e. the matrix `(Y_1 | … | Y_r)` is unit upper triangular on
/// its first `r` rows and vanishes below.
pub fn canonical_form_check(fields: &[&InfinitesimalStochasticTransformation], points: &[Vec<f64>]) -> CanonicalReport {
    let mut dev = 0.0f64;
    for x in points {
        for (j, v) in fields.iter().enumerate() {
            let y = v.y(x);
            if j >= y.len() {
                dev = f64::INFINITY;
                continue;
            }
            dev = dev.max((y[j] - 1.0).abs());
            for c in &y[j + 1..] {
                dev = dev.max(c.abs());
            }
            if y.iter().any(|c| !c.is_finite()) {
                dev = f64::INFINITY;
            }
        }
    }
    CanonicalReport { canonical: dev <= CANONICAL_TOL, deviation: dev }
}

#[derive(Clone, Copy, Debug)]
pub struct ReductionConfig {
    /// Parameter step of the orbit search for a section crossing.
    pub search_step: f64,
    /// RK4 sub-steps inside one search step.
    pub search_substeps: usize,
    /// Largest |flow parameter| searched.
    pub max_param: f64,
    /// RK4 steps per unit parameter for the transport.
    pub steps_per_unit: usize,
    /// The orbit may leave the box by this multiple of its half-widths.
    pub escape_factor: f64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self { search_step: 0.01, search_substeps: 10, max_param: 10.0, steps_per_unit: 1000, escape_factor: 2.0 }
    }
}

/// Solves `Y(B) = −B·C` and `Y(η) = −τη` by parallel transport of `(I, 1)`
/// from the section through `x0` orthogonal to `Y(x0)`.
#[derive(Clone)]
pub struct GaugeEtaSolver {
    v: InfinitesimalStochasticTransformation,
    x0: Vec<f64>,
    normal: Vec<f64>,
    domain: Vec<(f64, f64)>,
    cfg: ReductionConfig,
}

/// Solution at one point: `x = Φ_a(x_s)` with `x_s` on the section.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportResult {
    pub b: Vec<f64>,
    pub eta: f64,
    pub param: f64,
    pub section_point: Vec<f64>,
}

impl GaugeEtaSolver {
    pub fn new(v: InfinitesimalStochasticTransformation, x0: &[f64], domain: &[(f64, f64)], cfg: ReductionConfig) -> Result<Self> {
        check_dim(v.state_dim, x0.len())?;
        check_dim(v.state_dim, domain.len())?;
        let y0 = v.y(x0);
        let n = linalg::norm(&y0);
        if !(n >= REGULARITY_FLOOR) {
            return Err(StosymError::Domain(format!("Y vanishes at the section base point (|Y| = {n:e})")));
        }
        let normal = y0.iter().map(|c| c / n).collect();
        Ok(Self { v, x0: x0.to_vec(), normal, domain: domain.to_vec(), cfg })
    }

    fn section(&self, p: &[f64]) -> f64 {
        p.iter().zip(&self.x0).zip(&self.normal).map(|((a, b), n)| (a - b) * n).sum()
    }

    fn escaped(&self, p: &[f64]) -> bool {
        p.iter().zip(&self.domain).any(|(c, (lo, hi))| {
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo) * self.cfg.escape_factor.max(1.0);
            !c.is_finite() || (c - mid).abs() > half
        })
    }

    /// RK4 on `p' = sign·Y(p)` over parameter length `len` with `n` steps.
    fn drift(&self, p: &[f64], sign: f64, len: f64, n: usize) -> Vec<f64> {
        let h = sign * len / n as f64;
        let mut s = p.to_vec();
        let ax = |s: &[f64], d: &[f64], c: f64| -> Vec<f64> { s.iter().zip(d).map(|(a, b)| a + c * b).collect() };
        for _ in 0..n {
            let k1 = self.v.y(&s);
            let k2 = self.v.y(&ax(&s, &k1, h / 2.0));
            let k3 = self.v.y(&ax(&s, &k2, h / 2.0));
            let k4 = self.v.y(&ax(&s, &k3, h));
            for i in 0..s.len() {
                s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        s
    }

    /// Refines a crossing in `[0, step]` from `p` by Illinois regula falsi.
    fn refine(&self, p: &[f64], sign: f64, f0: f64, f1: f64) -> (f64, Vec<f64>) {
        let step = self.cfg.search_step;
        let sub = |t: f64| {
            let n = ((t / step) * self.cfg.search_substeps as f64).ceil().max(1.0) as usize;
            self.drift(p, sign, t, n)
        };
        let (mut a, mut b, mut fa, mut fb) = (0.0, step, f0, f1);
        let mut side = 0i8;
        let mut best = (b, sub(b));
        for _ in 0..100 {
            let t = if fb != fa { (a * fb - b * fa) / (fb - fa) } else { 0.5 * (a + b) };
            let q = sub(t);
            let ft = self.section(&q);
            best = (t, q);
            if ft.abs() < 1e-15 || (b - a).abs() < 1e-15 {
                break;
            }
            if (ft > 0.0) == (fb > 0.0) {
                b = t;
                fb = ft;
                if side == 1 {
                    fa /= 2.0;
                }
                side = 1;
            } else {
                a = t;
                fa = ft;
                if side == -1 {
                    fb /= 2.0;
                }
                side = -1;
            }
        }
        best
    }

    /// Flow parameter `a` and section point `x_s` with `Φ_a(x_s) = x`; among
    /// crossings where `Y` points along the section normal the smallest `|a|` wins.
    pub fn orbit_parameter(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(self.v.state_dim, x.len())?;
        let ny = linalg::norm(&self.v.y(x));
        if !(ny >= REGULARITY_FLOOR) {
            return Err(StosymError::Domain(format!("Y vanishes at {x:?}")));
        }
        let positive = |p: &[f64]| linalg::dot(&self.v.y(p), &self.normal) > 0.0;
        if self.section(x).abs() < 1e-15 && positive(x) {
            return Ok((0.0, x.to_vec()));
        }
        let step = self.cfg.search_step;
        let steps = (self.cfg.max_param / step).ceil() as usize;
        // Backward search finds x_s with x = Φ_t(x_s); forward search x_s = Φ_t(x).
        let mut cur = [x.to_vec(), x.to_vec()];
        let mut alive = [true, true];
        for s in 0..steps {
            let mut found: Vec<(f64, f64, Vec<f64>)> = Vec::new();
            for (d, sign) in [(0usize, -1.0), (1, 1.0)] {
                if !alive[d] {
                    continue;
                }
                let next = self.drift(&cur[d], sign, step, self.cfg.search_substeps);
                if self.escaped(&next) {
                    alive[d] = false;
                    continue;
                }
                let (f0, f1) = (self.section(&cur[d]), self.section(&next));
                if f0 != 0.0 && f0.signum() != f1.signum() || f1 == 0.0 {
                    let (t, q) = self.refine(&cur[d], sign, f0, f1);
                    if positive(&q) {
                        let a = -sign * (s as f64 * step + t);
                        found.push((a.abs(), a, q));
                    }
                }
                cur[d] = next;
            }
            if let Some((_, a, q)) = found.into_iter().min_by(|p, q| p.0.total_cmp(&q.0)) {
                return Ok((a, q));
            }
            if !alive[0] && !alive[1] {
                return Err(StosymError::Domain(format!("orbit through {x:?} escapes the domain before meeting the section")));
            }
        }
        Err(StosymError::Domain(format!("no section crossing within |a| ≤ {} for {x:?}", self.cfg.max_param)))
    }

    /// Transports `(I, 1)` from the section point to `x`.
    pub fn solve_at(&self, x: &[f64]) -> Result<TransportResult> {
        let (a, xs) = self.orbit_parameter(x)?;
        let m = self.v.state_dim;
        let k = self.v.gauge_dim;
        let n = ((self.cfg.steps_per_unit as f64) * a.abs().max(1.0)).ceil() as usize;
        let h = a / n as f64;
        let rhs = |s: &[f64]| -> Vec<f64> {
            let p = &s[..m];
            let b = &s[m..m + k * k];
            let mut out = self.v.y(p);
            out.extend(linalg::mat_mul(b, &self.v.c(p), k, k, k).iter().map(|c| -c));
            out.push(-self.v.tau(p) * s[m + k * k]);
            out
        };
        let mut s = xs.clone();
        s.extend(linalg::identity(k));
        s.push(1.0);
        let ax = |s: &[f64], d: &[f64], c: f64| -> Vec<f64> { s.iter().zip(d).map(|(p, q)| p + c * q).collect() };
        if a != 0.0 {
            for _ in 0..n {
                let k1 = rhs(&s);
                let k2 = rhs(&ax(&s, &k1, h / 2.0));
                let k3 = rhs(&ax(&s, &k2, h / 2.0));
                let k4 = rhs(&ax(&s, &k3, h));
                for i in 0..s.len() {
                    s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        Ok(TransportResult { b: s[m..m + k * k].to_vec(), eta: s[m + k * k], param: a, section_point: xs })
    }

    /// `T = (id, B, η)`; points where the transport fails map to NaN.
    pub fn transformation(&self) -> StochasticTransformation {
        let (m, k) = (self.v.state_dim, self.v.gauge_dim);
        let (s1, s2) = (self.clone(), self.clone());
        let id: crate::sde::StateFn = Arc::new(|x: &[f64]| x.to_vec());
        StochasticTransformation::new(
            m,
            k,
            id.clone(),
            Some(id),
            Arc::new(move |x| s1.solve_at(x).map(|r| r.b).unwrap_or_else(|_| vec![f64::NAN; k * k])),
            Arc::new(move |x| s2.solve_at(x).map(|r| r.eta).unwrap_or(f64::NAN)),
        )
        .with_jacobian(Arc::new(move |_| linalg::identity(m)))
    }
}

/// `B` and `η` tabulated on a tensor grid over the domain box.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaugeEtaGrid {
    pub axes: Vec<Vec<f64>>,
    pub points: Vec<Vec<f64>>,
    /// `None` where the transport failed (vanishing field, escaping orbit).
    pub b: Vec<Option<Vec<f64>>>,
    pub eta: Vec<Option<f64>>,
    pub gauge_dim: usize,
}

impl GaugeEtaGrid {
    pub fn failures(&self) -> usize {
        self.b.iter().filter(|b| b.is_none()).count()
    }

    fn cell(&self, x: &[f64]) -> Option<(Vec<usize>, Vec<f64>)> {
        let mut idx = Vec::new();
        let mut frac = Vec::new();
        for (ax, c) in self.axes.iter().zip(x) {
            if ax.len() < 2 || *c < ax[0] || *c > ax[ax.len() - 1] {
                return None;
            }
            let i = ax.partition_point(|v| v <= c).clamp(1, ax.len() - 1) - 1;
            idx.push(i);
            frac.push((c - ax[i]) / (ax[i + 1] - ax[i]));
        }
        Some((idx, frac))
    }

    fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.axes).fold(0, |acc, (i, ax)| acc * ax.len() + i)
    }

    /// Multilinear interpolation of `(B, η)`; `None` outside the grid or next
    /// to a failed node.
    pub fn interpolate(&self, x: &[f64]) -> Option<(Vec<f64>, f64)> {
        let (idx, frac) = self.cell(x)?;
        let d = idx.len();
        let kk = self.gauge_dim * self.gauge_dim;
        let mut b = vec![0.0; kk];
        let mut eta = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut node = idx.clone();
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    node[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w == 0.0 {
                continue;
            }
            let f = self.flat(&node);
            let (bn, en) = (self.b[f].as_ref()?, self.eta[f]?);
            for (o, v) in b.iter_mut().zip(bn) {
                *o += w * v;
            }
            eta += w * en;
        }
        Some((b, eta))
    }
}

/// Tabulates `(B, η)` on a grid with `per_axis` nodes per coordinate, in parallel.
pub fn solve_gauge_eta(
    v: &InfinitesimalStochasticTransformation,
    x0: &[f64],
    domain: &[(f64, f64)],
    per_axis: usize,
    cfg: ReductionConfig,
) -> Result<GaugeEtaGrid> {
    if per_axis < 2 {
        return Err(StosymError::InvalidParameter("a grid needs at least two nodes per axis".into()));
    }
    let solver = GaugeEtaSolver::new(v.clone(), x0, domain, cfg)?;
    let axes: Vec<Vec<f64>> =
        domain.iter().map(|(lo, hi)| (0..per_axis).map(|i| lo + (hi - lo) * i as f64 / (per_axis - 1) as f64).collect()).collect();
    let mut points = vec![Vec::new()];
    for ax in &axes {
        points = points.into_iter().flat_map(|p| ax.iter().map(move |c| [p.clone(), vec![*c]].concat())).collect();
    }
    let results: Vec<Option<TransportResult>> = points.par_iter().map(|p| solver.solve_at(p).ok()).collect();
    let b = results.iter().map(|r| r.as_ref().map(|r| r.b.clone())).collect();
    let eta = results.iter().map(|r| r.as_ref().map(|r| r.eta)).collect();
    Ok(GaugeEtaGrid { axes, points, b, eta, gauge_dim: v.gauge_dim })
}

/// Largest `|Y(B) + B·C|` and `|Y(η) + τη|` over the probes, by finite differences.
pub fn transport_defect(solver: &GaugeEtaSolver, points: &[Vec<f64>]) -> Result<f64> {
    let k = solver.v.gauge_dim;
    let mut worst = 0.0f64;
    for x in points {
        let r = solver.solve_at(x)?;
        let y = solver.v.y(x);
        let yb =
            crate::transform::directional_derivative(|p| solver.solve_at(p).map(|r| r.b).unwrap_or_else(|_| vec![f64::NAN; k * k]), x, &y);
        let bc = linalg::mat_mul(&r.b, &solver.v.c(x), k, k, k);
        let ye = crate::transform::directional_derivative(|p| vec![solver.solve_at(p).map(|r| r.eta).unwrap_or(f64::NAN)], x, &y)[0];
        let d1 = yb.iter().zip(&bc).fold(0.0f64, |a, (p, q)| a.max((p + q).abs()));
        let d2 = (ye + solver.v.tau(x) * r.eta).abs();
        worst = worst.max(d1).max(d2);
        if !worst.is_finite() {
            return Err(StosymError::Numeric(format!("transport defect undefined at {x:?}")));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dependence {
    pub component: usize,
    pub coordinate: usize,
    pub max_variation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriangularReport {
    pub r: usize,
    pub residuals: Vec<Dependence>,
    pub max_residual: f64,
    pub threshold: f64,
    pub pass: bool,
}

const VARIATIONS: [f64; 4] = [-1.3, -0.4, 0.7, 1.9];

/// Tests whether `Ψ^i − x^i` ignores `x^1..x^i` for `i ≤ r` and `Ψ^i` ignores
/// `x^1..x^r` for `i > r`, by shifting one forbidden coordinate at a time.
pub fn triangular_check(sde: &GeometricalSde, r: usize, points: &[(Vec<f64>, Vec<f64>)]) -> Result<TriangularReport> {
    let m = sde.state_dim;
    if r > m {
        return Err(StosymError::InvalidParameter(format!("r = {r} exceeds the state dimension {m}")));
    }
    let quantity = |i: usize, x: &[f64], z: &[f64]| {
        let v = sde.eval(x, z)[i];
        if i < r {
            v - x[i]
        } else {
            v
        }
    };
    let mut residuals = Vec::new();
    for i in 0..m {
        let forbidden = if i < r { 0..=i } else { 0..=r.wrapping_sub(1) };
        if r == 0 {
            continue;
        }
        for j in forbidden {
            let mut worst = 0.0f64;
            for (x, z) in points {
                check_dim(m, x.len())?;
                let base = quantity(i, x, z);
                for d in VARIATIONS {
                    let mut y = x.clone();
                    y[j] += d;
                    let dv = (quantity(i, &y, z) - base).abs();
                    worst = worst.max(if dv.is_finite() { dv } else { f64::INFINITY });
                }
            }
            residuals.push(Dependence { component: i, coordinate: j, max_variation: worst });
        }
    }
    let max_residual = residuals.iter().fold(0.0f64, |a, d| a.max(d.max_variation));
    Ok(TriangularReport { r, residuals, max_residual, threshold: TRIANGULAR_TOL, pass: max_residual <= TRIANGULAR_TOL })
}

/// Rebuilds the first `r` coordinates from the reduced path of the others.
///
/// Discrete drivers use `X^i_ℓ = X^i_{ℓ−1} + (Ψ^i − x^i)(X_{ℓ−1}, ΔZ_ℓ)`; grid
/// drivers take one grid-integration step per interval from the assembled state.
pub fn reconstruct(reduced: &CadlagPath, sde: &GeometricalSde, z: &CadlagPath, x0: &[f64], r: usize) -> Result<CadlagPath> {
    let m = sde.state_dim;
    check_dim(m, x0.len())?;
    if r > m {
        return Err(StosymError::InvalidParameter(format!("r = {r} exceeds the state dimension {m}")));
    }
    if r < m {
        check_dim(m - r, reduced.dim())?;
        if reduced.times.len() != z.times.len() || reduced.times.iter().zip(&z.times).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(StosymError::Usage("reduced path and driver live on different grids".into()));
        }
        if linalg::max_abs_diff(&reduced.values[0], &x0[r..]) > 1e-12 {
            return Err(StosymError::Usage("reduced path does not start at the given initial state".into()));
        }
    }
    let assemble = |lower: &[f64], s: usize| -> Vec<f64> {
        let mut v = lower.to_vec();
        if r < m {
            v.extend_from_slice(&reduced.values[s]);
        }
        v
    };
    let mut lower = vec![x0[..r].to_vec()];
    for s in 1..z.len() {
        let prev = assemble(&lower[s - 1], s - 1);
        let next = match z.style {
            PathStyle::DiscreteJump => {
                let dz = z.increment(s)?;
                let f = sde.eval(&prev, &dz);
                f[..r].to_vec()
            }
            PathStyle::GridSampled => {
                let piece = CadlagPath::new(
                    z.space.clone(),
                    PathStyle::GridSampled,
                    vec![z.times[s - 1], z.times[s]],
                    vec![z.values[s - 1].clone(), z.values[s].clone()],
                )?
                .with_jumps(vec![None, z.jumps[s].clone()])?;
                solve_grid(sde, &piece, &prev)?.values[1][..r].to_vec()
            }
        };
        lower.push(next);
    }
    let values = (0..z.len()).map(|s| assemble(&lower[s], s)).collect();
    CadlagPath::new(PathSpace::Euclidean(m), z.style, z.times.clone(), values)
}

/// Reconstructs many reduced paths in parallel.
pub fn reconstruct_many(jobs: &[(CadlagPath, CadlagPath, Vec<f64>)], sde: &GeometricalSde, r: usize) -> Vec<Result<CadlagPath>> {
    jobs.par_iter().map(|(red, z, x0)| reconstruct(red, sde, z, x0, r)).collect()
}
