//! Euler and Milstein schemes for `dX = μ(X) dt + σ(X) dW`, the discretized
//! noise they consume, and gauge rotations of that noise.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, StosymError};
use crate::lie_groups::GroupDescriptor;
use crate::linalg;
use crate::path::{CadlagPath, PathSpace, PathStyle};
use crate::sde::{central_jacobian, GeometricalSde, JacFn, PsiFn, SecondOrder, StateFn};

/// Orthogonality tolerance for gauge rotations of noise.
pub const ORTHOGONALITY_TOL: f64 = 1e-12;

#[derive(Clone)]
pub struct BrownianSde {
    pub state_dim: usize,
    pub noise_dim: usize,
    mu: StateFn,
    /// Row-major `m×k`.
    sigma: StateFn,
    /// `∂_j σ^i_α` at index `(i·k + α)·m + j`.
    d_sigma: Option<StateFn>,
}

impl std::fmt::Debug for BrownianSde {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BrownianSde")
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("analytic_d_sigma", &self.d_sigma.is_some())
            .finish()
    }
}

impl BrownianSde {
    pub fn new(state_dim: usize, noise_dim: usize, mu: StateFn, sigma: StateFn) -> Self {
        Self { state_dim, noise_dim, mu, sigma, d_sigma: None }
    }

    pub fn with_d_sigma(mut self, d: StateFn) -> Self {
        self.d_sigma = Some(d);
        self
    }

    pub fn mu(&self, x: &[f64]) -> Vec<f64> {
        (self.mu)(x)
    }

    pub fn sigma(&self, x: &[f64]) -> Vec<f64> {
        (self.sigma)(x)
    }

    pub fn has_analytic_d_sigma(&self) -> bool {
        self.d_sigma.is_some()
    }

    pub fn d_sigma(&self, x: &[f64]) -> Vec<f64> {
        match &self.d_sigma {
            Some(d) => d(x),
            None => central_jacobian(|p| self.sigma(p), x, self.state_dim * self.noise_dim),
        }
    }

    pub fn d_mu(&self, x: &[f64]) -> Vec<f64> {
        central_jacobian(|p| self.mu(p), x, self.state_dim)
    }

    /// `x + μΔt + σΔW`.
    pub fn euler_step(&self, x: &[f64], dt: f64, dw: &[f64]) -> Vec<f64> {
        let (m, k) = (self.state_dim, self.noise_dim);
        let mu = self.mu(x);
        let sw = linalg::mat_vec(&self.sigma(x), dw, m, k);
        (0..m).map(|i| x[i] + mu[i] * dt + sw[i]).collect()
    }

    /// `Σ_{α,β} σ^j_α ∂_j σ^i_β Δ𝕎^{βα}`, the iterated-integral correction.
    pub fn milstein_correction(&self, x: &[f64], dww: &[f64]) -> Vec<f64> {
        let (m, k) = (self.state_dim, self.noise_dim);
        let s = self.sigma(x);
        let ds = self.d_sigma(x);
        let mut out = vec![0.0; m];
        for (i, o) in out.iter_mut().enumerate() {
            for b in 0..k {
                for a in 0..k {
                    let w = dww[b * k + a];
                    if w == 0.0 {
                        continue;
                    }
                    let mut lie = 0.0;
                    for j in 0..m {
                        lie += s[j * k + a] * ds[(i * k + b) * m + j];
                    }
                    *o += lie * w;
                }
            }
        }
        out
    }

    pub fn milstein_step(&self, x: &[f64], dt: f64, dw: &[f64], dww: &[f64]) -> Vec<f64> {
        let e = self.euler_step(x, dt, dw);
        let c = self.milstein_correction(x, dww);
        e.iter().zip(&c).map(|(a, b)| a + b).collect()
    }

    /// The Euler map as a geometrical SDE driven by `(t, W)` on `ℝ^{1+k}`.
    pub fn as_euler_sde(&self) -> GeometricalSde {
        let (m, k) = (self.state_dim, self.noise_dim);
        let a = self.clone();
        let psi: PsiFn = Arc::new(move |x, z| a.euler_step(x, z[0], &z[1..]));
        let b = self.clone();
        let jz: JacFn = Arc::new(move |x, _| {
            let mu = b.mu(x);
            let s = b.sigma(x);
            let mut out = vec![0.0; m * (1 + k)];
            for i in 0..m {
                out[i * (1 + k)] = mu[i];
                out[i * (1 + k) + 1..(i + 1) * (1 + k)].copy_from_slice(&s[i * k..(i + 1) * k]);
            }
            out
        });
        GeometricalSde::new(m, GroupDescriptor::Additive(1 + k), psi).with_jac_z(jz).with_second_order(SecondOrder::Zero)
    }

    /// The Milstein map as a geometrical SDE on the Milstein group.
    pub fn as_milstein_sde(&self) -> GeometricalSde {
        let k = self.noise_dim;
        let a = self.clone();
        let psi: PsiFn = Arc::new(move |x, z| a.milstein_step(x, z[0], &z[1..1 + k], &z[1 + k..]));
        GeometricalSde::new(self.state_dim, GroupDescriptor::Milstein(k), psi)
    }
}

/// Per-step noise on a grid; `dww[ℓ][α·k + β] = ∫(W^β − W^β_{t_{ℓ−1}}) dW^α`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizedNoise {
    pub times: Vec<f64>,
    pub dw: Vec<Vec<f64>>,
    pub dww: Option<Vec<Vec<f64>>>,
}

impl DiscretizedNoise {
    pub fn new(times: Vec<f64>, dw: Vec<Vec<f64>>, dww: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let n = Self { times, dw, dww };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() < 2 || self.times[0] != 0.0 || self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(StosymError::InvalidParameter("noise grid must start at 0 and increase".into()));
        }
        check_dim(self.times.len() - 1, self.dw.len())?;
        let k = self.noise_dim();
        if self.dw.iter().any(|v| v.len() != k) {
            return Err(StosymError::InvalidParameter("ragged ΔW rows".into()));
        }
        if let Some(d) = &self.dww {
            check_dim(self.dw.len(), d.len())?;
            if d.iter().any(|v| v.len() != k * k) {
                return Err(StosymError::InvalidParameter("Δ𝕎 rows must have k² entries".into()));
            }
        }
        Ok(())
    }

    pub fn noise_dim(&self) -> usize {
        self.dw.first().map_or(0, |v| v.len())
    }

    pub fn steps(&self) -> usize {
        self.dw.len()
    }

    pub fn dt(&self, step: usize) -> f64 {
        self.times[step + 1] - self.times[step]
    }

    /// Increments of a grid-sampled path on `ℝᵏ`, without iterated integrals.
    pub fn from_path(w: &CadlagPath) -> Result<Self> {
        if !matches!(w.space, PathSpace::Group(GroupDescriptor::Additive(_))) {
            return Err(StosymError::DescriptorMismatch("Brownian path must live on ℝᵏ".into()));
        }
        let dw = (1..w.len()).map(|s| w.increment(s)).collect::<Result<Vec<_>>>()?;
        Self::new(w.times.clone(), dw, None)
    }

    /// Scalar noise with the closed form `Δ𝕎 = ½(ΔW² − Δt)`.
    pub fn scalar_with_closed_form(times: Vec<f64>, dw: Vec<f64>) -> Result<Self> {
        let dww = dw.iter().enumerate().map(|(s, w)| vec![0.5 * (w * w - (times[s + 1] - times[s]))]).collect();
        Self::new(times, dw.into_iter().map(|w| vec![w]).collect(), Some(dww))
    }

    /// The cumulative path `(t, W, 𝕎)` on the Milstein group.
    pub fn milstein_path(&self) -> Result<CadlagPath> {
        let dww = self.dww.as_ref().ok_or_else(|| StosymError::Usage("Δ𝕎 missing".into()))?;
        let k = self.noise_dim();
        let g = GroupDescriptor::Milstein(k);
        let mut values = vec![g.identity_coords()];
        for s in 0..self.steps() {
            let mut inc = vec![self.dt(s)];
            inc.extend(&self.dw[s]);
            inc.extend(&dww[s]);
            let next = g.mul_coords(&inc, values.last().unwrap())?;
            values.push(next);
        }
        CadlagPath::new(PathSpace::Group(g), PathStyle::GridSampled, self.times.clone(), values)
    }

    /// Merges `factor` consecutive steps. `Δ𝕎` is merged through the group law,
    /// which is exact (Chen's relation).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps() % factor != 0 {
            return Err(StosymError::InvalidParameter(format!("{} steps not divisible by {factor}", self.steps())));
        }
        let k = self.noise_dim();
        let g = GroupDescriptor::Milstein(k);
        let mut times = vec![0.0];
        let mut dw = Vec::new();
        let mut dww = self.dww.as_ref().map(|_| Vec::new());
        for block in 0..self.steps() / factor {
            let mut acc = g.identity_coords();
            for s in block * factor..(block + 1) * factor {
                let mut inc = vec![self.dt(s)];
                inc.extend(&self.dw[s]);
                match &self.dww {
                    Some(d) => inc.extend(&d[s]),
                    None => inc.extend(vec![0.0; k * k]),
                }
                acc = g.mul_coords(&inc, &acc)?;
            }
            times.push(self.times[(block + 1) * factor]);
            dw.push(acc[1..1 + k].to_vec());
            if let Some(d) = dww.as_mut() {
                d.push(acc[1 + k..].to_vec());
            }
        }
        Self::new(times, dw, dww)
    }

    /// Rows `kind,step,alpha,beta,value` with `kind ∈ {dW, dWW}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["kind", "step", "alpha", "beta", "value"])?;
        let k = self.noise_dim();
        for s in 0..self.steps() {
            wr.write_record(["dt".into(), s.to_string(), String::new(), String::new(), format!("{:.17e}", self.dt(s))])?;
            for a in 0..k {
                wr.write_record(["dW".into(), s.to_string(), a.to_string(), String::new(), format!("{:.17e}", self.dw[s][a])])?;
            }
            if let Some(d) = &self.dww {
                for a in 0..k {
                    for b in 0..k {
                        wr.write_record(["dWW".into(), s.to_string(), a.to_string(), b.to_string(), format!("{:.17e}", d[s][a * k + b])])?;
                    }
                }
            }
        }
        wr.flush()?;
        Ok(())
    }
}

fn solve_with(
    sde: &BrownianSde,
    noise: &DiscretizedNoise,
    x0: &[f64],
    mut step: impl FnMut(usize, &[f64]) -> Vec<f64>,
) -> Result<CadlagPath> {
    check_dim(sde.state_dim, x0.len())?;
    check_dim(sde.noise_dim, noise.noise_dim())?;
    let mut values = Vec::with_capacity(noise.times.len());
    values.push(x0.to_vec());
    for s in 0..noise.steps() {
        let next = step(s, &values[s]);
        values.push(next);
    }
    CadlagPath::new(PathSpace::Euclidean(sde.state_dim), PathStyle::GridSampled, noise.times.clone(), values)
}

pub fn euler_solve(sde: &BrownianSde, noise: &DiscretizedNoise, x0: &[f64]) -> Result<CadlagPath> {
    solve_with(sde, noise, x0, |s, x| sde.euler_step(x, noise.dt(s), &noise.dw[s]))
}

pub fn milstein_solve(sde: &BrownianSde, noise: &DiscretizedNoise, x0: &[f64]) -> Result<CadlagPath> {
    let dww = noise.dww.as_ref().ok_or_else(|| StosymError::Usage("Milstein scheme needs Δ𝕎".into()))?;
    solve_with(sde, noise, x0, |s, x| sde.milstein_step(x, noise.dt(s), &noise.dw[s], &dww[s]))
}

/// Left-point sums of `∫(W^β − W^β_{t_{ℓ−1}}) dW^α` over the fine steps inside
/// each coarse step. Every coarse knot must be a fine knot.
pub fn levy_area(fine: &CadlagPath, coarse: &[f64]) -> Result<DiscretizedNoise> {
    let k = match &fine.space {
        PathSpace::Group(GroupDescriptor::Additive(k)) => *k,
        other => return Err(StosymError::DescriptorMismatch(format!("Brownian path on {other:?}"))),
    };
    let mut idx = Vec::with_capacity(coarse.len());
    let mut j = 0usize;
    for &t in coarse {
        let tol = 1e-12 * t.abs().max(1.0);
        while j < fine.len() && fine.times[j] < t - tol {
            j += 1;
        }
        if j == fine.len() || (fine.times[j] - t).abs() > tol {
            return Err(StosymError::InvalidParameter(format!("coarse knot {t} is not a fine knot")));
        }
        idx.push(j);
    }
    if idx[0] != 0 {
        return Err(StosymError::InvalidParameter("coarse grid must start at 0".into()));
    }
    let mut dw = Vec::new();
    let mut dww = Vec::new();
    for w in idx.windows(2) {
        let start = &fine.values[w[0]];
        let mut area = vec![0.0; k * k];
        for s in w[0]..w[1] {
            let (a, b) = (&fine.values[s], &fine.values[s + 1]);
            for al in 0..k {
                let d = b[al] - a[al];
                for be in 0..k {
                    area[al * k + be] += (a[be] - start[be]) * d;
                }
            }
        }
        dw.push(fine.values[w[1]].iter().zip(start).map(|(p, q)| p - q).collect());
        dww.push(area);
    }
    DiscretizedNoise::new(coarse.to_vec(), dw, Some(dww))
}

fn check_rotations(b_steps: &[Vec<f64>], k: usize) -> Result<()> {
    for (s, b) in b_steps.iter().enumerate() {
        check_dim(k * k, b.len())?;
        let d = linalg::orthogonality_defect(b, k);
        if d > ORTHOGONALITY_TOL {
            return Err(StosymError::InvalidParameter(format!("step {s}: BᵀB − I = {d:e}")));
        }
    }
    Ok(())
}

/// `ΔW′_ℓ = B_ℓ·ΔW_ℓ`; iterated integrals are dropped.
pub fn gauge_rotate_euler(b_steps: &[Vec<f64>], noise: &DiscretizedNoise) -> Result<DiscretizedNoise> {
    let k = noise.noise_dim();
    check_dim(noise.steps(), b_steps.len())?;
    check_rotations(b_steps, k)?;
    let dw = noise.dw.iter().zip(b_steps).map(|(w, b)| linalg::mat_vec(b, w, k, k)).collect();
    DiscretizedNoise::new(noise.times.clone(), dw, None)
}

/// `ΔW′_ℓ = B_ℓ·ΔW_ℓ` and `Δ𝕎′_ℓ = B_ℓ·Δ𝕎_ℓ·B_ℓᵀ`.
pub fn gauge_rotate_milstein(b_steps: &[Vec<f64>], noise: &DiscretizedNoise) -> Result<DiscretizedNoise> {
    let k = noise.noise_dim();
    let dww = noise.dww.as_ref().ok_or_else(|| StosymError::Usage("Δ𝕎 missing".into()))?;
    check_dim(noise.steps(), b_steps.len())?;
    check_rotations(b_steps, k)?;
    let dw = noise.dw.iter().zip(b_steps).map(|(w, b)| linalg::mat_vec(b, w, k, k)).collect();
    let dww = dww
        .iter()
        .zip(b_steps)
        .map(|(m, b)| linalg::mat_mul(&linalg::mat_mul(b, m, k, k, k), &linalg::transpose(b, k, k), k, k, k))
        .collect();
    DiscretizedNoise::new(noise.times.clone(), dw, Some(dww))
}

/// Euler scheme driven by increments rotated with `B(X_{ℓ−1})`; returns the
/// solution and the rotated noise.
pub fn euler_solve_state_rotated(
    sde: &BrownianSde,
    noise: &DiscretizedNoise,
    x0: &[f64],
    rotation: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<(CadlagPath, DiscretizedNoise)> {
    let k = noise.noise_dim();
    let mut rotated = Vec::with_capacity(noise.steps());
    let mut err = None;
    let path = solve_with(sde, noise, x0, |s, x| {
        let b = rotation(x);
        if linalg::orthogonality_defect(&b, k) > ORTHOGONALITY_TOL {
            err.get_or_insert(s);
        }
        let w = linalg::mat_vec(&b, &noise.dw[s], k, k);
        let next = sde.euler_step(x, noise.dt(s), &w);
        rotated.push(w);
        next
    })?;
    if let Some(s) = err {
        return Err(StosymError::InvalidParameter(format!("rotation at step {s} is not orthogonal")));
    }
    Ok((path, DiscretizedNoise::new(noise.times.clone(), rotated, None)?))
}

/// `μ = 0`, `σ = √(1+|x|²)·I` on the plane: rotation invariant.
pub fn isotropic_plane() -> BrownianSde {
    let s = |x: &[f64]| (1.0 + x[0] * x[0] + x[1] * x[1]).sqrt();
    BrownianSde::new(
        2,
        2,
        Arc::new(|_| vec![0.0, 0.0]),
        Arc::new(move |x| {
            let v = s(x);
            vec![v, 0.0, 0.0, v]
        }),
    )
    .with_d_sigma(Arc::new(move |x| {
        let v = s(x);
        let g = [x[0] / v, x[1] / v];
        // entries (i·k + α)·m + j
        vec![g[0], g[1], 0.0, 0.0, 0.0, 0.0, g[0], g[1]]
    }))
}

/// A scalar function of one real argument.
pub type ClockFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// `μ = 0`, `σ(x) = R(φ(x¹))` on the plane, with `R(θ)` the rotation by `θ`.
/// Symmetric under `(∂₁, −φ′(x¹)·R, 0)` for every smooth `φ`.
pub fn rotating_diffusion(phi: ClockFn, dphi: ClockFn) -> BrownianSde {
    let p1 = phi.clone();
    BrownianSde::new(2, 2, Arc::new(|_| vec![0.0, 0.0]), Arc::new(move |x| linalg::rotation2(p1(x[0])))).with_d_sigma(Arc::new(move |x| {
        let (s, c) = phi(x[0]).sin_cos();
        let d = dphi(x[0]);
        let dr = [-s * d, -c * d, c * d, -s * d];
        // entries (i·k + α)·m + j; only j = 0 is nonzero
        let mut out = vec![0.0; 8];
        for (e, v) in dr.iter().enumerate() {
            out[e * 2] = *v;
        }
        out
    }))
}
