//! Determining-equation residuals and law-level symmetry checks.

use std::collections::BTreeMap;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StosymError};
use crate::lie_groups::GroupDescriptor;
use crate::linalg;
use crate::noise::CharacteristicTriplet;
use crate::noise::{sample, symmetric_stable, DriverSpec, IncrementSampler, JumpLaw, JumpMeasure};
use crate::path::PathStyle;
use crate::rng::substream;
use crate::schemes::BrownianSde;
use crate::sde::{central_jacobian, solve_discrete, solve_grid, GeometricalSde, FD_STEP_SECOND};
use crate::stats::{ks_two_sample, mc_mean_ci};
use crate::transform::{
    apply_p, directional_derivative, GaugeAction, InfinitesimalStochasticTransformation, StochasticTransformation, TimeAction,
};

/// Threshold for residuals built from analytic derivatives.
pub const ANALYTIC_TOL: f64 = 1e-9;
/// Threshold for residuals that involve finite differences.
pub const FD_TOL: f64 = 1e-6;
pub const KS_LEVEL: f64 = 0.01;
/// Monte Carlo conditions pass within this many standard errors.
pub const MC_STDERR_FACTOR: f64 = 4.0;
/// Absolute slack added to Monte Carlo thresholds so that exact zeros pass.
pub const MC_FLOOR: f64 = 1e-12;
pub const DEFAULT_PROBES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub max_abs: f64,
    pub mean_abs: f64,
    pub grid_size: usize,
    pub per_equation: BTreeMap<String, f64>,
    pub threshold: f64,
    pub pass: bool,
}

/// Accumulates absolute residual entries by equation label.
#[derive(Default)]
struct Accumulator {
    sum: f64,
    count: usize,
    max: f64,
    per: BTreeMap<String, f64>,
}

impl Accumulator {
    fn add(&mut self, label: &str, v: f64) {
        let a = if v.is_finite() { v.abs() } else { f64::INFINITY };
        self.sum += a;
        self.count += 1;
        self.max = self.max.max(a);
        let e = self.per.entry(label.to_string()).or_insert(0.0);
        *e = e.max(a);
    }

    fn report(self, grid_size: usize, threshold: f64) -> ResidualReport {
        let mean = if self.count == 0 { 0.0 } else { self.sum / self.count as f64 };
        ResidualReport {
            max_abs: self.max,
            mean_abs: mean.min(self.max),
            grid_size,
            per_equation: self.per,
            threshold,
            pass: self.max <= threshold,
        }
    }
}

/// Point `i` of the Halton sequence in `dim` dimensions.
pub fn halton(i: usize, dim: usize) -> Vec<f64> {
    const PRIMES: [usize; 40] = [
        2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131,
        137, 139, 149, 151, 157, 163, 167, 173,
    ];
    (0..dim)
        .map(|d| {
            let b = PRIMES[d % PRIMES.len()];
            let (mut f, mut r, mut n) = (1.0, 0.0, i + 1 + 97 * (d / PRIMES.len()));
            while n > 0 {
                f /= b as f64;
                r += f * (n % b) as f64;
                n /= b;
            }
            r
        })
        .collect()
}

/// Quasi-random points `x` in a box.
pub fn probe_states(x_box: &[(f64, f64)], n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| halton(i, x_box.len()).iter().zip(x_box).map(|(u, (lo, hi))| lo + (hi - lo) * u).collect()).collect()
}

/// Quasi-random `(x, z)` pairs: `x` in the box, `z` within coordinate distance 1
/// of `1_N` (non-invertible draws are skipped).
pub fn probe_grid(x_box: &[(f64, f64)], driver: &GroupDescriptor, n: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let m = x_box.len();
    let id = driver.identity_coords();
    let d = id.len();
    let scale = 1.0 / (d.max(1) as f64).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while out.len() < n {
        let u = halton(i, m + d);
        i += 1;
        let x: Vec<f64> = u[..m].iter().zip(x_box).map(|(u, (lo, hi))| lo + (hi - lo) * u).collect();
        let z: Vec<f64> = id.iter().zip(&u[m..]).map(|(c, u)| c + scale * (2.0 * u - 1.0)).collect();
        if driver.is_valid(&z, 1e-6) {
            out.push((x, z));
        }
    }
    out
}

/// Residual of `Y(Ψ) − ∂ₓΨ·Y − τ·∂_zΨ·H(z) − ∂_zΨ·K(C)(z)` per state component.
/// Without a time action the `τ` term is dropped.
pub fn determining_residual(
    sde: &GeometricalSde,
    v: &InfinitesimalStochasticTransformation,
    gauge: &GaugeAction,
    time: Option<&TimeAction>,
    points: &[(Vec<f64>, Vec<f64>)],
) -> Result<ResidualReport> {
    if gauge.driver != sde.driver {
        return Err(StosymError::DescriptorMismatch("gauge action acts on a different driver".into()));
    }
    let mut acc = Accumulator::default();
    for (x, z) in points {
        let values = determining_terms(sde, v, gauge, time, x, z)?;
        for (i, r) in values.iter().enumerate() {
            acc.add(&format!("component_{i}"), *r);
        }
    }
    let tol = if sde.has_analytic_jacobians() { ANALYTIC_TOL } else { FD_TOL };
    Ok(acc.report(points.len(), tol))
}

/// Pointwise residual vector of the general determining equation.
pub fn determining_terms(
    sde: &GeometricalSde,
    v: &InfinitesimalStochasticTransformation,
    gauge: &GaugeAction,
    time: Option<&TimeAction>,
    x: &[f64],
    z: &[f64],
) -> Result<Vec<f64>> {
    let m = sde.state_dim;
    let n = sde.driver_dim();
    let psi = sde.eval(x, z);
    let y_psi = v.y(&psi);
    if y_psi.iter().any(|c| !c.is_finite()) {
        return Err(StosymError::Domain(format!("Y undefined at Ψ({x:?}, {z:?})")));
    }
    let jx = sde.jacobian_x(x, z)?;
    let jz = sde.jacobian_z(x, z)?;
    let mut field = gauge.generator_field(&v.c(x), z);
    if let Some(t) = time {
        let h = t.generator(z);
        let tau = v.tau(x);
        for (f, hh) in field.iter_mut().zip(&h) {
            *f += tau * hh;
        }
    }
    let jy = linalg::mat_vec(&jx, &v.y(x), m, m);
    let jk = linalg::mat_vec(&jz, &field, m, n);
    Ok((0..m).map(|i| y_psi[i] - jy[i] - jk[i]).collect())
}

/// Hessian of each component of `Y`: entry `(j, a, b)` at `(j·m + a)·m + b`.
/// Differentiates an analytic Jacobian once, otherwise uses second differences of `Y`.
fn y_hessian(v: &InfinitesimalStochasticTransformation, x: &[f64]) -> Vec<f64> {
    let m = v.state_dim;
    if v.has_analytic_jacobian() {
        return central_jacobian(|p| v.y_jacobian(p), x, m * m);
    }
    let mut out = vec![0.0; m * m * m];
    let h: Vec<f64> = x.iter().map(|c| FD_STEP_SECOND * c.abs().max(1.0)).collect();
    let at = |da: &[(usize, f64)]| {
        let mut q = x.to_vec();
        for (i, d) in da {
            q[*i] += d;
        }
        v.y(&q)
    };
    let y0 = v.y(x);
    for a in 0..m {
        for b in a..m {
            let vals: Vec<f64> = if a == b {
                let (p, q) = (at(&[(a, h[a])]), at(&[(a, -h[a])]));
                (0..m).map(|j| (p[j] - 2.0 * y0[j] + q[j]) / (h[a] * h[a])).collect()
            } else {
                let pp = at(&[(a, h[a]), (b, h[b])]);
                let pm = at(&[(a, h[a]), (b, -h[b])]);
                let mp = at(&[(a, -h[a]), (b, h[b])]);
                let mm = at(&[(a, -h[a]), (b, -h[b])]);
                (0..m).map(|j| (pp[j] - pm[j] - mp[j] + mm[j]) / (4.0 * h[a] * h[b])).collect()
            };
            for j in 0..m {
                out[(j * m + a) * m + b] = vals[j];
                out[(j * m + b) * m + a] = vals[j];
            }
        }
    }
    out
}

/// Continuous-time determining equations of `dX = μ dt + σ dW`:
/// drift `Y·∇μ − L(Y) + τμ` and diffusion `Y·∇σ_α − σ_α·∇Y + ½τσ_α + σ_β C^β_α`.
pub fn brownian_determining_residual(sde: &BrownianSde, v: &InfinitesimalStochasticTransformation, xs: &[Vec<f64>]) -> ResidualReport {
    let mut acc = Accumulator::default();
    for x in xs {
        let (e1, e2) = brownian_terms(sde, v, x);
        for (j, r) in e1.iter().enumerate() {
            acc.add(&format!("drift_{j}"), *r);
        }
        for (idx, r) in e2.iter().enumerate() {
            acc.add(&format!("diffusion_{}_{}", idx / sde.noise_dim, idx % sde.noise_dim), *r);
        }
    }
    acc.report(xs.len(), FD_TOL)
}

/// Pointwise `(drift, diffusion)` residuals; the diffusion entries are `m×k` row-major.
pub fn brownian_terms(sde: &BrownianSde, v: &InfinitesimalStochasticTransformation, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, k) = (sde.state_dim, sde.noise_dim);
    let y = v.y(x);
    let jy = v.y_jacobian(x);
    let hy = y_hessian(v, x);
    let mu = sde.mu(x);
    let dmu = sde.d_mu(x);
    let s = sde.sigma(x);
    let ds = sde.d_sigma(x);
    let c = v.c(x);
    let tau = v.tau(x);
    let e1 = (0..m)
        .map(|j| {
            let y_grad_mu: f64 = (0..m).map(|i| y[i] * dmu[j * m + i]).sum();
            let mut ly = 0.0;
            for a in 0..m {
                ly += mu[a] * jy[j * m + a];
                for b in 0..m {
                    let ss: f64 = (0..k).map(|al| s[a * k + al] * s[b * k + al]).sum();
                    ly += 0.5 * ss * hy[(j * m + a) * m + b];
                }
            }
            y_grad_mu - ly + tau * mu[j]
        })
        .collect();
    let mut e2 = vec![0.0; m * k];
    for j in 0..m {
        for al in 0..k {
            let y_grad_s: f64 = (0..m).map(|i| y[i] * ds[(j * k + al) * m + i]).sum();
            let s_grad_y: f64 = (0..m).map(|i| s[i * k + al] * jy[j * m + i]).sum();
            let sc: f64 = (0..k).map(|be| s[j * k + be] * c[be * k + al]).sum();
            e2[j * k + al] = y_grad_s - s_grad_y + 0.5 * tau * s[j * k + al] + sc;
        }
    }
    (e1, e2)
}

/// Pointwise Euler-scheme residuals for a quasi-strong generator `(Y, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EulerResidual {
    /// `Y(F) − Y − (Y·∇μ)Δt − (Y·∇σ)ΔW − σCΔW` with `F = x + μΔt + σΔW`.
    pub full: Vec<f64>,
    /// `Y(F) − Y − (Y·∇μ)Δt − (σ_α·∇Y)ΔW^α`: the departure of `Y` from
    /// linearity along the step once the diffusion equation is used.
    pub linearity_defect: Vec<f64>,
}

pub fn euler_terms(sde: &BrownianSde, v: &InfinitesimalStochasticTransformation, x: &[f64], dt: f64, dw: &[f64]) -> EulerResidual {
    let (m, k) = (sde.state_dim, sde.noise_dim);
    let f = sde.euler_step(x, dt, dw);
    let yf = v.y(&f);
    let y = v.y(x);
    let jy = v.y_jacobian(x);
    let dmu = sde.d_mu(x);
    let s = sde.sigma(x);
    let ds = sde.d_sigma(x);
    let c = v.c(x);
    let cw = linalg::mat_vec(&c, dw, k, k);
    let mut full = vec![0.0; m];
    let mut lin = vec![0.0; m];
    for i in 0..m {
        let y_grad_mu: f64 = (0..m).map(|j| y[j] * dmu[i * m + j]).sum();
        let mut y_grad_s_w = 0.0;
        let mut s_grad_y_w = 0.0;
        for al in 0..k {
            y_grad_s_w += (0..m).map(|j| y[j] * ds[(i * k + al) * m + j]).sum::<f64>() * dw[al];
            s_grad_y_w += (0..m).map(|j| s[j * k + al] * jy[i * m + j]).sum::<f64>() * dw[al];
        }
        let scw: f64 = (0..k).map(|al| s[i * k + al] * cw[al]).sum();
        full[i] = yf[i] - y[i] - y_grad_mu * dt - y_grad_s_w - scw;
        lin[i] = yf[i] - y[i] - y_grad_mu * dt - s_grad_y_w;
    }
    EulerResidual { full, linearity_defect: lin }
}

/// Euler residual over `(x, Δt, ΔW)` points; the headline uses the full residual.
pub fn euler_determining_residual(
    sde: &BrownianSde,
    v: &InfinitesimalStochasticTransformation,
    points: &[(Vec<f64>, f64, Vec<f64>)],
) -> ResidualReport {
    let mut acc = Accumulator::default();
    let mut lin_max = 0.0f64;
    for (x, dt, dw) in points {
        let r = euler_terms(sde, v, x, *dt, dw);
        for (i, e) in r.full.iter().enumerate() {
            acc.add(&format!("weak_euler_{i}"), *e);
        }
        lin_max = r.linearity_defect.iter().fold(lin_max, |a, b| a.max(b.abs()));
    }
    let mut rep = acc.report(points.len(), FD_TOL);
    rep.per_equation.insert("linearity_defect".into(), lin_max);
    rep
}

/// Milstein residual: the general determining equation for the Milstein map
/// `F(x, (Δt, ΔW, Δ𝕎))` with the Milstein-group generator `(0, C·ΔW, C·Δ𝕎 + Δ𝕎·Cᵀ)`.
pub fn milstein_terms(
    sde: &BrownianSde,
    v: &InfinitesimalStochasticTransformation,
    x: &[f64],
    dt: f64,
    dw: &[f64],
    dww: &[f64],
) -> Vec<f64> {
    let (m, k) = (sde.state_dim, sde.noise_dim);
    let y = v.y(x);
    let f = sde.milstein_step(x, dt, dw, dww);
    let yf = v.y(&f);
    let along_y = directional_derivative(|p| sde.milstein_step(p, dt, dw, dww), x, &y);
    let c = v.c(x);
    let ct = linalg::transpose(&c, k, k);
    let k_w = linalg::mat_vec(&c, dw, k, k);
    let left = linalg::mat_mul(&c, dww, k, k, k);
    let right = linalg::mat_mul(dww, &ct, k, k, k);
    let k_ww: Vec<f64> = left.iter().zip(&right).map(|(a, b)| a + b).collect();
    // F is affine in (ΔW, Δ𝕎), so ∂_z F applied to the generator is exact.
    let s = linalg::mat_vec(&sde.sigma(x), &k_w, m, k);
    let corr = sde.milstein_correction(x, &k_ww);
    (0..m).map(|i| yf[i] - along_y[i] - s[i] - corr[i]).collect()
}

pub fn milstein_determining_residual(
    sde: &BrownianSde,
    v: &InfinitesimalStochasticTransformation,
    points: &[SchemeProbe],
) -> ResidualReport {
    let mut acc = Accumulator::default();
    for (x, dt, dw, dww) in points {
        for (i, e) in milstein_terms(sde, v, x, *dt, dw, dww).iter().enumerate() {
            acc.add(&format!("milstein_{i}"), *e);
        }
    }
    acc.report(points.len(), ANALYTIC_TOL)
}

/// `(x, Δt, ΔW, Δ𝕎)` for scheme residuals.
pub type SchemeProbe = (Vec<f64>, f64, Vec<f64>, Vec<f64>);

/// Quasi-random `(x, Δt, ΔW, Δ𝕎)` points; `Δ𝕎` obeys the symmetrization
/// identity `Δ𝕎^{αβ} + Δ𝕎^{βα} = ΔW^αΔW^β − δ^{αβ}Δt` and carries a random area.
pub fn scheme_probe_points(x_box: &[(f64, f64)], k: usize, n: usize) -> Vec<SchemeProbe> {
    let m = x_box.len();
    let d = 1 + k + k * (k - 1) / 2;
    (0..n)
        .map(|i| {
            let u = halton(i, m + d);
            let x: Vec<f64> = u[..m].iter().zip(x_box).map(|(u, (lo, hi))| lo + (hi - lo) * u).collect();
            let dt = 0.001 + 0.099 * u[m];
            let dw: Vec<f64> = (0..k).map(|a| (2.0 * u[m + 1 + a] - 1.0) * 3.0 * dt.sqrt()).collect();
            let mut dww = vec![0.0; k * k];
            let mut next = m + 1 + k;
            for a in 0..k {
                dww[a * k + a] = 0.5 * (dw[a] * dw[a] - dt);
                for b in a + 1..k {
                    let area = (2.0 * u[next] - 1.0) * dt;
                    next += 1;
                    dww[a * k + b] = 0.5 * dw[a] * dw[b] + area;
                    dww[b * k + a] = 0.5 * dw[a] * dw[b] - area;
                }
            }
            (x, dt, dw, dww)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckMethod {
    Exact,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawCondition {
    pub label: String,
    pub method: CheckMethod,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    pub stderr: Option<f64>,
}

impl LawCondition {
    fn new(label: &str, method: CheckMethod, statistic: f64, threshold: f64, stderr: Option<f64>) -> Self {
        Self { label: label.into(), method, statistic, threshold, pass: statistic <= threshold, stderr }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawCheckReport {
    pub conditions: Vec<LawCondition>,
    /// The characteristics determine the law only under a uniqueness
    /// hypothesis that is not checked numerically.
    pub uniqueness_assumed: bool,
    pub pass: bool,
}

impl LawCheckReport {
    fn new(conditions: Vec<LawCondition>, uniqueness_assumed: bool) -> Self {
        let pass = conditions.iter().all(|c| c.pass);
        Self { conditions, uniqueness_assumed, pass }
    }

    pub fn condition(&self, label: &str) -> Option<&LawCondition> {
        self.conditions.iter().find(|c| c.label == label)
    }

    /// Whether every condition whose label starts with `prefix` passes.
    pub fn passes(&self, prefix: &str) -> bool {
        self.conditions.iter().filter(|c| c.label.starts_with(prefix)).all(|c| c.pass)
    }
}

fn additive_dim(g: &GroupDescriptor) -> Result<usize> {
    match g {
        GroupDescriptor::Additive(n) => Ok(*n),
        other => Err(StosymError::Unsupported(format!("triplet checks need an additive driver, got {other:?}"))),
    }
}

/// Per-coordinate two-sample KS with a Bonferroni-corrected level. Coordinates
/// that are constant in both samples are compared exactly instead.
fn ks_conditions(label: &str, a: &[Vec<f64>], b: &[Vec<f64>], level: f64, out: &mut Vec<LawCondition>) -> Result<()> {
    let d = a[0].len();
    let spread = |v: &[f64]| {
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(*x), h.max(*x)));
        (lo, hi)
    };
    for c in 0..d {
        let xa: Vec<f64> = a.iter().map(|v| v[c]).collect();
        let xb: Vec<f64> = b.iter().map(|v| v[c]).collect();
        let (la, ha) = spread(&xa);
        let (lb, hb) = spread(&xb);
        let scale = ha.abs().max(hb.abs()).max(1.0);
        let name = format!("{label}_coord_{c}");
        if ha - la <= 1e-9 * scale && hb - lb <= 1e-9 * scale {
            let gap = (ha - hb).abs().max((la - lb).abs());
            out.push(LawCondition::new(&name, CheckMethod::Exact, gap, 1e-9 * scale, None));
            continue;
        }
        let r = ks_two_sample(&xa, &xb, level)?;
        out.push(LawCondition::new(&name, CheckMethod::MonteCarlo, r.statistic, r.threshold, None));
    }
    Ok(())
}

/// Gauge invariance of a Lévy triplet under `Ξ_g` for each sampled `g`:
/// `A₀ = Υ_g A₀ Υ_gᵀ` exactly, `Ξ_{g*}ν₀ = ν₀` by two-sample tests and the drift
/// identity `Υ_g b₀ + ∫ (h(Ξ_g z) − Υ_g h(z)) ν₀(dz) = b₀` by Monte Carlo.
pub fn check_levy_gauge(
    triplet: &CharacteristicTriplet,
    action: &GaugeAction,
    gs: &[Vec<f64>],
    mc_samples: usize,
    seed: u64,
) -> Result<LawCheckReport> {
    triplet.validate()?;
    let n = additive_dim(&action.driver)?;
    if n != triplet.dim() {
        return Err(StosymError::Dimension { expected: triplet.dim(), got: n });
    }
    let mut conds = Vec::new();
    let n_tests = gs.len().max(1) * n;
    let level = KS_LEVEL / n_tests as f64;
    for (gi, g) in gs.iter().enumerate() {
        let ups = action.upsilon(g);
        let ut = linalg::transpose(&ups, n, n);
        let pushed = linalg::mat_mul(&linalg::mat_mul(&ups, &triplet.a0, n, n, n), &ut, n, n, n);
        let diff = linalg::max_abs_diff(&pushed, &triplet.a0);
        conds.push(LawCondition::new(&format!("diffusion_g{gi}"), CheckMethod::Exact, diff, ANALYTIC_TOL, None));
        match &triplet.nu0 {
            JumpMeasure::None => {
                let d = linalg::max_abs_diff(&linalg::mat_vec(&ups, &triplet.b0, n, n), &triplet.b0);
                conds.push(LawCondition::new(&format!("drift_g{gi}"), CheckMethod::Exact, d, ANALYTIC_TOL, None));
                conds.push(LawCondition::new(&format!("measure_g{gi}"), CheckMethod::Exact, 0.0, 0.0, None));
            }
            JumpMeasure::AlphaStable { .. } => {
                // The symmetric stable measure is invariant under sign flips only.
                let d = linalg::max_abs_diff(&ups.iter().map(|v| v.abs()).collect::<Vec<_>>(), &linalg::identity(n));
                let orth = linalg::orthogonality_defect(&ups, n);
                let stat = if n == 1 { d } else { d.max(orth) };
                conds.push(LawCondition::new(&format!("measure_g{gi}"), CheckMethod::Exact, stat, ANALYTIC_TOL, None));
                let bd = linalg::max_abs_diff(&linalg::mat_vec(&ups, &triplet.b0, n, n), &triplet.b0);
                conds.push(LawCondition::new(&format!("drift_g{gi}"), CheckMethod::Exact, bd, ANALYTIC_TOL, None));
            }
            JumpMeasure::Finite { rate, law } => {
                let mut r1 = substream(seed, 2 * gi as u64 + 1);
                let mut r2 = substream(seed, 2 * gi as u64 + 2);
                let a: Vec<Vec<f64>> = (0..mc_samples).map(|_| law.sample(&mut r1)).collect();
                let b: Vec<Vec<f64>> = (0..mc_samples).map(|_| action.act(g, &law.sample(&mut r2))).collect();
                if matches!(law, JumpLaw::PointMass(_)) {
                    let d = linalg::max_abs_diff(&a[0], &b[0]);
                    conds.push(LawCondition::new(&format!("measure_g{gi}"), CheckMethod::Exact, d, ANALYTIC_TOL, None));
                } else {
                    ks_conditions(&format!("measure_g{gi}"), &a, &b, level, &mut conds)?;
                }
                let h = &triplet.truncation;
                let mut per = vec![Vec::with_capacity(mc_samples); n];
                for z in &a {
                    let hz = h.apply(&action.act(g, z));
                    let uh = linalg::mat_vec(&ups, &h.apply(z), n, n);
                    for c in 0..n {
                        per[c].push(rate * (hz[c] - uh[c]));
                    }
                }
                let ub = linalg::mat_vec(&ups, &triplet.b0, n, n);
                let (mut stat, mut se_max, mut worst_ratio) = (0.0f64, 0.0f64, 0.0f64);
                for c in 0..n {
                    let (mean, se) = if mc_samples >= 2 { mc_mean_ci(&per[c])? } else { (per[c][0], 0.0) };
                    let gap = (ub[c] + mean - triplet.b0[c]).abs();
                    let thr = MC_STDERR_FACTOR * se + MC_FLOOR;
                    if gap / thr >= worst_ratio {
                        worst_ratio = gap / thr;
                        stat = gap;
                        se_max = se;
                    }
                }
                conds.push(LawCondition::new(
                    &format!("drift_g{gi}"),
                    CheckMethod::MonteCarlo,
                    stat,
                    MC_STDERR_FACTOR * se_max + MC_FLOOR,
                    Some(se_max),
                ));
            }
        }
    }
    Ok(LawCheckReport::new(conds, true))
}

/// Exponent `p` of a time action that acts as `Γ_r(z) = r^p z` on `ℝⁿ`, or an
/// error if it does not.
fn power_exponent(time: &TimeAction, n: usize) -> Result<f64> {
    let z: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
    let g = time.act(2.0, &z);
    let p = (g[0] / z[0]).ln() / 2f64.ln();
    for r in [0.5, 3.0] {
        let w = time.act(r, &z);
        let expect: Vec<f64> = z.iter().map(|v| r.powf(p) * v).collect();
        if linalg::max_abs_diff(&w, &expect) > 1e-9 {
            return Err(StosymError::Unsupported("stable measures need a power-scaling time action".into()));
        }
    }
    Ok(p)
}

/// Time symmetry of a Lévy triplet under `Γ_r`: `A₀ = (1/r)γ_r A₀ γ_rᵀ`,
/// `ν₀ = (1/r)Γ_{r*}ν₀` and `b₀ = (1/r)(γ_r b₀ + ∫ (h(Γ_r z) − γ_r h(z)) ν₀(dz))`.
/// Stable measures are additionally checked on the increment law:
/// `Γ_r(Z_{1/r})` against `Z_1`.
pub fn check_levy_time(
    triplet: &CharacteristicTriplet,
    time: &TimeAction,
    rs: &[f64],
    mc_samples: usize,
    seed: u64,
) -> Result<LawCheckReport> {
    triplet.validate()?;
    let n = additive_dim(&time.driver)?;
    if n != triplet.dim() {
        return Err(StosymError::Dimension { expected: triplet.dim(), got: n });
    }
    let mut conds = Vec::new();
    let level = KS_LEVEL / (rs.len().max(1) * n) as f64;
    for (ri, &r) in rs.iter().enumerate() {
        let gam = time.gamma(r);
        let gt = linalg::transpose(&gam, n, n);
        let pushed: Vec<f64> = linalg::mat_mul(&linalg::mat_mul(&gam, &triplet.a0, n, n, n), &gt, n, n, n).iter().map(|v| v / r).collect();
        let d = linalg::max_abs_diff(&pushed, &triplet.a0);
        conds.push(LawCondition::new(&format!("diffusion_r{ri}"), CheckMethod::Exact, d, ANALYTIC_TOL, None));
        match &triplet.nu0 {
            JumpMeasure::None => {
                let gb: Vec<f64> = linalg::mat_vec(&gam, &triplet.b0, n, n).iter().map(|v| v / r).collect();
                let d = linalg::max_abs_diff(&gb, &triplet.b0);
                conds.push(LawCondition::new(&format!("drift_r{ri}"), CheckMethod::Exact, d, ANALYTIC_TOL, None));
                conds.push(LawCondition::new(&format!("measure_r{ri}"), CheckMethod::Exact, 0.0, 0.0, None));
            }
            JumpMeasure::AlphaStable { alpha } => {
                let p = power_exponent(time, n)?;
                // Γ_{r*}ν₀ = r^{pα} ν₀ for the stable measure |z|^{−1−α}dz.
                let mass = (r.powf(p * alpha) / r - 1.0).abs();
                conds.push(LawCondition::new(&format!("measure_r{ri}"), CheckMethod::Exact, mass, ANALYTIC_TOL, None));
                let gb: Vec<f64> = linalg::mat_vec(&gam, &triplet.b0, n, n).iter().map(|v| v / r).collect();
                let d = linalg::max_abs_diff(&gb, &triplet.b0);
                conds.push(LawCondition::new(&format!("drift_r{ri}"), CheckMethod::Exact, d, ANALYTIC_TOL, None));
                let mut r1 = substream(seed, 2 * ri as u64 + 1);
                let mut r2 = substream(seed, 2 * ri as u64 + 2);
                let z1: Vec<Vec<f64>> = (0..mc_samples).map(|_| (0..n).map(|_| symmetric_stable(*alpha, &mut r1)).collect()).collect();
                let scale = (1.0 / r).powf(1.0 / alpha);
                let z2: Vec<Vec<f64>> = (0..mc_samples)
                    .map(|_| {
                        let w: Vec<f64> = (0..n).map(|_| scale * symmetric_stable(*alpha, &mut r2)).collect();
                        time.act(r, &w)
                    })
                    .collect();
                ks_conditions(&format!("increment_law_r{ri}"), &z1, &z2, level, &mut conds)?;
            }
            JumpMeasure::Finite { rate, law } => {
                // Total masses must agree: rate = rate / r.
                let mass = (rate / r - rate).abs();
                conds.push(LawCondition::new(&format!("measure_mass_r{ri}"), CheckMethod::Exact, mass, ANALYTIC_TOL, None));
                let mut r1 = substream(seed, 2 * ri as u64 + 1);
                let mut r2 = substream(seed, 2 * ri as u64 + 2);
                let a: Vec<Vec<f64>> = (0..mc_samples).map(|_| law.sample(&mut r1)).collect();
                let b: Vec<Vec<f64>> = (0..mc_samples).map(|_| time.act(r, &law.sample(&mut r2))).collect();
                if matches!(law, JumpLaw::PointMass(_)) {
                    let d = linalg::max_abs_diff(&a[0], &b[0]);
                    conds.push(LawCondition::new(&format!("measure_shape_r{ri}"), CheckMethod::Exact, d, ANALYTIC_TOL, None));
                } else {
                    ks_conditions(&format!("measure_shape_r{ri}"), &a, &b, level, &mut conds)?;
                }
                let h = &triplet.truncation;
                let gb = linalg::mat_vec(&gam, &triplet.b0, n, n);
                let mut worst = (0.0f64, 0.0f64, 0.0f64);
                for c in 0..n {
                    let terms: Vec<f64> =
                        a.iter().map(|z| rate * (h.apply(&time.act(r, z))[c] - linalg::mat_vec(&gam, &h.apply(z), n, n)[c]) / r).collect();
                    let (mean, se) = mc_mean_ci(&terms)?;
                    let gap = (gb[c] / r + mean - triplet.b0[c]).abs();
                    let thr = MC_STDERR_FACTOR * se + MC_FLOOR;
                    if gap / thr >= worst.0 {
                        worst = (gap / thr, gap, se);
                    }
                }
                conds.push(LawCondition::new(
                    &format!("drift_r{ri}"),
                    CheckMethod::MonteCarlo,
                    worst.1,
                    MC_STDERR_FACTOR * worst.2 + MC_FLOOR,
                    Some(worst.2),
                ));
            }
        }
    }
    Ok(LawCheckReport::new(conds, true))
}

/// Conjugation-invariant summaries of a `k×k` matrix: sorted eigenvalues of the
/// symmetric part and sorted singular values.
pub fn matrix_invariants(a: &[f64], k: usize) -> Vec<f64> {
    let at = linalg::transpose(a, k, k);
    let sym: Vec<f64> = a.iter().zip(&at).map(|(x, y)| 0.5 * (x + y)).collect();
    let mut eig: Vec<f64> = SymmetricEigen::new(linalg::to_dmatrix(&sym, k, k)).eigenvalues.iter().cloned().collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    let mut sv: Vec<f64> = linalg::to_dmatrix(a, k, k).singular_values().iter().cloned().collect();
    sv.sort_by(|x, y| x.total_cmp(y));
    eig.extend(sv);
    eig
}

fn summaries(g: &GroupDescriptor, z: &[f64]) -> Vec<f64> {
    match g {
        GroupDescriptor::GeneralLinear(k) => {
            let mut s = z.to_vec();
            s.extend(matrix_invariants(z, *k));
            s
        }
        GroupDescriptor::Product(fs) => {
            let mut out = Vec::new();
            for (f, r) in fs.iter().zip(g.factor_ranges()) {
                out.extend(summaries(f, &z[r]));
            }
            out
        }
        GroupDescriptor::Additive(_) | GroupDescriptor::Milstein(_) => {
            let mut s = z.to_vec();
            s.push(linalg::norm(z));
            s
        }
    }
}

/// Invariance `Ξ_{g*}μ = μ` of a per-step increment law, by two-sample KS
/// tests on every coordinate plus conjugation-invariant summaries (spectra of
/// matrix factors, norms of vector factors), Bonferroni-corrected.
pub fn check_discrete_gauge(
    sampler: &IncrementSampler,
    action: &GaugeAction,
    gs: &[Vec<f64>],
    mc_samples: usize,
    seed: u64,
) -> Result<LawCheckReport> {
    let g = &action.driver;
    let per_g = summaries(g, &g.identity_coords()).len();
    let level = KS_LEVEL / (gs.len().max(1) * per_g) as f64;
    let mut conds = Vec::new();
    for (gi, el) in gs.iter().enumerate() {
        let mut r1 = substream(seed, 2 * gi as u64 + 1);
        let mut r2 = substream(seed, 2 * gi as u64 + 2);
        let a: Vec<Vec<f64>> = (0..mc_samples).map(|_| summaries(g, &sampler(&mut r1))).collect();
        let b: Vec<Vec<f64>> = (0..mc_samples).map(|_| summaries(g, &action.act(el, &sampler(&mut r2)))).collect();
        ks_conditions(&format!("measure_g{gi}"), &a, &b, level, &mut conds)?;
    }
    Ok(LawCheckReport::new(conds, false))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathwiseReport {
    pub paths: usize,
    pub steps: usize,
    pub max_residual: f64,
    pub threshold: f64,
    pub exact: bool,
    pub pass: bool,
}

/// Pathwise tolerance for grid-sampled drivers.
pub const GRID_PATHWISE_TOL: f64 = 1e-6;
pub const DISCRETE_PATHWISE_TOL: f64 = 1e-10;

/// Simulates `(X, Z)` for `n_paths` seeds `spec.seed + i`, applies `P_T` and
/// measures how far the image pair is from solving the same equation.
pub fn is_symmetry_pathwise(
    sde: &GeometricalSde,
    t: &StochasticTransformation,
    gauge: &GaugeAction,
    time: Option<&TimeAction>,
    spec: &DriverSpec,
    n_paths: usize,
    x0: &[f64],
) -> Result<PathwiseReport> {
    let mut worst = 0.0f64;
    let mut steps = 0;
    let mut exact = true;
    for i in 0..n_paths {
        let mut s = spec.clone();
        s.seed = spec.seed.wrapping_add(i as u64);
        let z = sample(&s)?;
        steps = z.steps();
        let (xp, zp) = if z.style == PathStyle::DiscreteJump {
            let x = solve_discrete(sde, &z, x0)?;
            apply_p(t, &x, &z, gauge, time)?
        } else {
            exact = false;
            let x = solve_grid(sde, &z, x0)?;
            apply_p(t, &x, &z, gauge, time)?
        };
        let r = pathwise_residual(sde, &xp, &zp)?;
        worst = worst.max(r);
    }
    let threshold = if exact { DISCRETE_PATHWISE_TOL } else { GRID_PATHWISE_TOL };
    Ok(PathwiseReport { paths: n_paths, steps, max_residual: worst, threshold, exact, pass: worst <= threshold })
}

/// Largest gap between `X` and the solution of `Ψ` driven by `Z` from `X_0`:
/// per-step recursion for discrete drivers, full re-solve on grids.
pub fn pathwise_residual(sde: &GeometricalSde, x: &crate::path::CadlagPath, z: &crate::path::CadlagPath) -> Result<f64> {
    let mut worst = 0.0f64;
    if z.style == PathStyle::DiscreteJump {
        for s in 1..z.len() {
            let pred = sde.eval(&x.values[s - 1], &z.increment(s)?);
            worst = worst.max(linalg::max_abs_diff(&pred, &x.values[s]));
        }
    } else {
        let re = solve_grid(sde, z, &x.values[0])?;
        for (a, b) in re.values.iter().zip(&x.values) {
            worst = worst.max(linalg::max_abs_diff(a, b));
        }
    }
    Ok(worst)
}
