//! Geometrical SDEs `Ψ(x, z)` and their solvers.
//!
//! Along a driver `Z`, the solution jumps by `X ↦ Ψ(X, ΔZ)` with
//! `ΔZ = Z_τ · Z_{τ−}⁻¹`. Between jumps of a grid-sampled driver the step is the
//! second-order expansion of `z′ ↦ Ψ(x, z′·z⁻¹)` at `z′ = z`. The map
//! `z′ ↦ z′·z⁻¹` is affine in the coordinates for every group in
//! [`GroupDescriptor`], so this reduces to derivatives of `Ψ(x, ·)` at `1_N`
//! applied to `δ = coords(Z_ℓ · Z_{ℓ−1}⁻¹) − coords(1_N)`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{check_dim, Result, StosymError};
use crate::lie_groups::GroupDescriptor;
use crate::linalg;
use crate::noise::JumpLaw;
use crate::path::{CadlagPath, PathSpace, PathStyle};
use crate::rng::{rng_from_seed, substream};

/// `(x, z) ↦ Ψ(x, z)`.
pub type PsiFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
/// Row-major Jacobian evaluated at `(x, z)`.
pub type JacFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
/// `x ↦ ∂²Ψ^i/∂z^α∂z^β (x, 1_N)`, stored as `i·n² + α·n + β`.
pub type HessFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
/// `x ↦ value`.
pub type StateFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
/// `(control, x, z) ↦ Ψ_k(x, z)`.
pub type ControlledPsiFn = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// Step for central first differences.
pub const FD_STEP: f64 = 1e-5;
/// Step for central second differences of `Ψ` itself.
pub const FD_STEP_SECOND: f64 = 1e-4;

#[derive(Clone)]
pub enum SecondOrder {
    Analytic(HessFn),
    /// `Ψ(x, ·)` is affine in the driver coordinates.
    Zero,
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdeKind {
    /// Smooth in `z` with `Ψ(x, 1_N) = x`.
    Geometric,
    /// A random map applied per jump; only discrete drivers are allowed.
    IteratedMap,
}

#[derive(Clone)]
pub struct GeometricalSde {
    pub state_dim: usize,
    pub driver: GroupDescriptor,
    pub kind: SdeKind,
    psi: PsiFn,
    jac_x: Option<JacFn>,
    jac_z: Option<JacFn>,
    second: SecondOrder,
    pub allow_finite_differences: bool,
    /// Constant control value the evaluator was built with, if any.
    pub control: Option<Vec<f64>>,
}

impl std::fmt::Debug for GeometricalSde {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeometricalSde")
            .field("state_dim", &self.state_dim)
            .field("driver", &self.driver)
            .field("kind", &self.kind)
            .field("analytic_jac_x", &self.jac_x.is_some())
            .field("analytic_jac_z", &self.jac_z.is_some())
            .field("control", &self.control)
            .finish()
    }
}

impl GeometricalSde {
    pub fn new(state_dim: usize, driver: GroupDescriptor, psi: PsiFn) -> Self {
        Self {
            state_dim,
            driver,
            kind: SdeKind::Geometric,
            psi,
            jac_x: None,
            jac_z: None,
            second: SecondOrder::FiniteDifference,
            allow_finite_differences: true,
            control: None,
        }
    }

    /// Builds `Ψ = Ψ_k` for a control value held fixed for the whole run.
    pub fn with_control(state_dim: usize, driver: GroupDescriptor, family: ControlledPsiFn, control: Vec<f64>) -> Self {
        let k = control.clone();
        let psi: PsiFn = Arc::new(move |x, z| family(&k, x, z));
        let mut s = Self::new(state_dim, driver, psi);
        s.control = Some(control);
        s
    }

    pub fn with_jac_x(mut self, f: JacFn) -> Self {
        self.jac_x = Some(f);
        self
    }

    pub fn with_jac_z(mut self, f: JacFn) -> Self {
        self.jac_z = Some(f);
        self
    }

    pub fn with_second_order(mut self, s: SecondOrder) -> Self {
        self.second = s;
        self
    }

    pub fn without_finite_differences(mut self) -> Self {
        self.allow_finite_differences = false;
        self
    }

    pub fn driver_dim(&self) -> usize {
        self.driver.coordinate_dim()
    }

    pub fn eval(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        (self.psi)(x, z)
    }

    pub fn psi_fn(&self) -> PsiFn {
        self.psi.clone()
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        self.jac_x.is_some() && self.jac_z.is_some()
    }

    fn fd_allowed(&self) -> Result<()> {
        if self.allow_finite_differences {
            Ok(())
        } else {
            Err(StosymError::Unsupported("derivative evaluator missing and finite differences disabled".into()))
        }
    }

    /// `∂Ψ^i/∂x^j`, `m×m`.
    pub fn jacobian_x(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if let Some(j) = &self.jac_x {
            return Ok(j(x, z));
        }
        self.fd_allowed()?;
        Ok(central_jacobian(|xx| self.eval(xx, z), x, self.state_dim))
    }

    /// `∂Ψ^i/∂z^α`, `m×n`.
    pub fn jacobian_z(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if let Some(j) = &self.jac_z {
            return Ok(j(x, z));
        }
        self.fd_allowed()?;
        Ok(central_jacobian(|zz| self.eval(x, zz), z, self.state_dim))
    }

    /// `∂Ψ^i/∂x^j` by finite differences, ignoring any analytic evaluator.
    pub fn jacobian_x_fd(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        central_jacobian(|xx| self.eval(xx, z), x, self.state_dim)
    }

    /// `∂Ψ^i/∂z^α` by finite differences, ignoring any analytic evaluator.
    pub fn jacobian_z_fd(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        central_jacobian(|zz| self.eval(x, zz), z, self.state_dim)
    }

    /// Second derivatives in `z` at the identity; `None` when they vanish.
    pub fn hessian_z_identity(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        let n = self.driver_dim();
        let m = self.state_dim;
        let id = self.driver.identity_coords();
        match &self.second {
            SecondOrder::Zero => Ok(None),
            SecondOrder::Analytic(h) => Ok(Some(h(x))),
            SecondOrder::FiniteDifference => {
                self.fd_allowed()?;
                let mut out = vec![0.0; m * n * n];
                if let Some(jz) = &self.jac_z {
                    let h = FD_STEP;
                    for b in 0..n {
                        let mut zp = id.clone();
                        let mut zm = id.clone();
                        zp[b] += h;
                        zm[b] -= h;
                        let (jp, jm) = (jz(x, &zp), jz(x, &zm));
                        for i in 0..m {
                            for a in 0..n {
                                out[i * n * n + a * n + b] = (jp[i * n + a] - jm[i * n + a]) / (2.0 * h);
                            }
                        }
                    }
                } else {
                    let h = FD_STEP_SECOND;
                    let f0 = self.eval(x, &id);
                    for a in 0..n {
                        for b in a..n {
                            let shifted = |sa: f64, sb: f64| {
                                let mut z = id.clone();
                                z[a] += sa;
                                z[b] += sb;
                                self.eval(x, &z)
                            };
                            let vals: Vec<f64> = if a == b {
                                let (p, q) = (shifted(h, 0.0), shifted(-h, 0.0));
                                (0..m).map(|i| (p[i] - 2.0 * f0[i] + q[i]) / (h * h)).collect()
                            } else {
                                let (pp, pm) = (shifted(h, h), shifted(h, -h));
                                let (mp, mm) = (shifted(-h, h), shifted(-h, -h));
                                (0..m).map(|i| (pp[i] - pm[i] - mp[i] + mm[i]) / (4.0 * h * h)).collect()
                            };
                            for i in 0..m {
                                out[i * n * n + a * n + b] = vals[i];
                                out[i * n * n + b * n + a] = vals[i];
                            }
                        }
                    }
                }
                Ok(Some(out))
            }
        }
    }

    /// Largest `|Ψ(x, 1_N) − x|` over the probes.
    pub fn identity_defect(&self, probes: &[Vec<f64>]) -> f64 {
        let id = self.driver.identity_coords();
        probes.iter().map(|x| linalg::max_abs_diff(&self.eval(x, &id), x)).fold(0.0, f64::max)
    }

    /// Largest relative gap between analytic and finite-difference Jacobians.
    pub fn derivative_agreement(&self, x: &[f64], z: &[f64]) -> f64 {
        let rel = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs() / p.abs().max(q.abs()).max(1.0)).fold(0.0, f64::max);
        let mut worst = 0.0f64;
        if let Some(j) = &self.jac_x {
            worst = worst.max(rel(&j(x, z), &self.jacobian_x_fd(x, z)));
        }
        if let Some(j) = &self.jac_z {
            worst = worst.max(rel(&j(x, z), &self.jacobian_z_fd(x, z)));
        }
        worst
    }
}

/// Central-difference Jacobian of `f: ℝᵈ → ℝᵐ` at `p`, `m×d` row-major.
pub fn central_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, p: &[f64], m: usize) -> Vec<f64> {
    let d = p.len();
    let mut out = vec![0.0; m * d];
    let mut q = p.to_vec();
    for a in 0..d {
        let h = FD_STEP * p[a].abs().max(1.0);
        q[a] = p[a] + h;
        let fp = f(&q);
        q[a] = p[a] - h;
        let fm = f(&q);
        q[a] = p[a];
        for i in 0..m {
            out[i * d + a] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    out
}

fn check_driver(sde: &GeometricalSde, z: &CadlagPath, x0: &[f64]) -> Result<()> {
    check_dim(sde.state_dim, x0.len())?;
    match &z.space {
        PathSpace::Group(g) if *g == sde.driver => Ok(()),
        other => Err(StosymError::DescriptorMismatch(format!("driver path lives on {other:?}, equation expects {:?}", sde.driver))),
    }
}

/// Exact recursion `X_ℓ = Ψ(X_{ℓ−1}, ΔZ_ℓ)` over the jump times of `z`.
pub fn solve_discrete(sde: &GeometricalSde, z: &CadlagPath, x0: &[f64]) -> Result<CadlagPath> {
    check_driver(sde, z, x0)?;
    if z.style != PathStyle::DiscreteJump {
        return Err(StosymError::Usage("solve_discrete needs a discrete-jump driver".into()));
    }
    let mut values = Vec::with_capacity(z.len());
    values.push(x0.to_vec());
    for s in 1..z.len() {
        let dz = z.increment(s)?;
        let next = sde.eval(&values[s - 1], &dz);
        check_dim(sde.state_dim, next.len())?;
        values.push(next);
    }
    CadlagPath::new(PathSpace::Euclidean(sde.state_dim), PathStyle::DiscreteJump, z.times.clone(), values)
}

/// Grid integration: second-order expansion on continuous motion and the exact
/// map `Ψ(x, J)` for each recorded jump `J`.
pub fn solve_grid(sde: &GeometricalSde, z: &CadlagPath, x0: &[f64]) -> Result<CadlagPath> {
    check_driver(sde, z, x0)?;
    if sde.kind == SdeKind::IteratedMap {
        return Err(StosymError::Usage("iterated random maps can only be solved along discrete drivers".into()));
    }
    if sde.jac_z.is_none() {
        sde.fd_allowed()?;
    }
    let g = &sde.driver;
    let n = g.coordinate_dim();
    let m = sde.state_dim;
    let id = g.identity_coords();
    let mut values = Vec::with_capacity(z.len());
    values.push(x0.to_vec());
    for s in 1..z.len() {
        let mut x = values[s - 1].clone();
        let jump = match z.style {
            PathStyle::DiscreteJump => Some(z.increment(s)?),
            PathStyle::GridSampled => z.jumps[s].clone(),
        };
        let before_jump = match &jump {
            Some(j) => g.mul_coords(&g.inv_coords(j)?, &z.values[s])?,
            None => z.values[s].clone(),
        };
        let inc = g.jump_coords(&before_jump, &z.values[s - 1])?;
        let delta: Vec<f64> = inc.iter().zip(&id).map(|(a, b)| a - b).collect();
        if delta.iter().any(|d| *d != 0.0) {
            let d1 = sde.jacobian_z(&x, &id)?;
            let d2 = sde.hessian_z_identity(&x)?;
            for i in 0..m {
                let mut dx = 0.0;
                for a in 0..n {
                    dx += d1[i * n + a] * delta[a];
                }
                if let Some(h) = &d2 {
                    let base = i * n * n;
                    for a in 0..n {
                        if delta[a] == 0.0 {
                            continue;
                        }
                        for b in 0..n {
                            dx += 0.5 * h[base + a * n + b] * delta[a] * delta[b];
                        }
                    }
                }
                x[i] += dx;
            }
        }
        if let Some(j) = &jump {
            x = sde.eval(&x, j);
        }
        values.push(x);
    }
    CadlagPath::new(PathSpace::Euclidean(m), PathStyle::GridSampled, z.times.clone(), values)
}

/// `Ψ(x, z) = x + σ(x)·z` on the additive group `ℝⁿ`; `sigma` returns `m×n`.
pub fn from_affine(state_dim: usize, noise_dim: usize, sigma: StateFn) -> GeometricalSde {
    let s1 = sigma.clone();
    let psi: PsiFn = Arc::new(move |x, z| {
        let sx = s1(x);
        let sz = linalg::mat_vec(&sx, z, state_dim, noise_dim);
        x.iter().zip(&sz).map(|(a, b)| a + b).collect()
    });
    let jz: JacFn = Arc::new(move |x, _z| sigma(x));
    GeometricalSde::new(state_dim, GroupDescriptor::Additive(noise_dim), psi).with_jac_z(jz).with_second_order(SecondOrder::Zero)
}

/// Monte Carlo estimate of the small-jump drift correction
/// `−∫_{|z|≤1} (F(x,z) − ∂_z F(x,z)·z) dν₀(z)`.
#[derive(Clone)]
pub struct DriftCorrection {
    rate: f64,
    samples: Arc<Vec<Vec<f64>>>,
    jump_map: PsiFn,
    state_dim: usize,
}

impl DriftCorrection {
    /// Returns `(correction, stderr)` per component at `x`.
    pub fn at(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.state_dim;
        let n = self.samples.len() as f64;
        let mut sum = vec![0.0; m];
        let mut sum2 = vec![0.0; m];
        for z in self.samples.iter() {
            let term = if linalg::norm(z) <= 1.0 {
                let f = (self.jump_map)(x, z);
                let jz = central_jacobian(|zz| (self.jump_map)(x, zz), z, m);
                let dfz = linalg::mat_vec(&jz, z, m, z.len());
                f.iter().zip(&dfz).map(|(a, b)| -(a - b) * self.rate).collect()
            } else {
                vec![0.0; m]
            };
            for i in 0..m {
                sum[i] += term[i];
                sum2[i] += term[i] * term[i];
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let se = (0..m).map(|i| ((sum2[i] / n - mean[i] * mean[i]).max(0.0) * n / (n - 1.0) / n).sqrt()).collect();
        (mean, se)
    }
}

/// Smooth SDE driven by `Z = (t, W, L)` on `ℝ^{1+k+d}`:
/// `Ψ(x, z) = x + μ̃(x) z⁰ + σ(x)·z_W + F(x, z_L)` with the compensated drift `μ̃`.
///
/// `jump_rate`/`jump_law` describe the finite-activity Lévy measure of `L`;
/// `mc_samples` draws from `jump_seed` fix the correction integral.
#[allow(clippy::too_many_arguments)]
pub fn from_smooth_levy(
    state_dim: usize,
    mu: StateFn,
    brownian_dim: usize,
    sigma: StateFn,
    jump_map: PsiFn,
    jump_rate: f64,
    jump_law: &JumpLaw,
    mc_samples: usize,
    jump_seed: u64,
) -> Result<(GeometricalSde, DriftCorrection)> {
    let m = state_dim;
    let k = brownian_dim;
    let d = jump_law.dim();
    let mut probe_rng = rng_from_seed(0x5eed);
    for _ in 0..20 {
        let x: Vec<f64> = (0..m).map(|_| probe_rng.random_range(-1.0..1.0)).collect();
        let f0 = jump_map(&x, &vec![0.0; d]);
        if f0.iter().any(|v| v.abs() > 1e-12) {
            return Err(StosymError::InvalidParameter(format!("jump map must vanish at zero jump; F({x:?}, 0) = {f0:?}")));
        }
    }
    let mut rng = substream(jump_seed, 1);
    let samples: Vec<Vec<f64>> = (0..mc_samples).map(|_| jump_law.sample(&mut rng)).collect();
    let corr = DriftCorrection { rate: jump_rate, samples: Arc::new(samples), jump_map: jump_map.clone(), state_dim: m };
    let c2 = corr.clone();
    let psi: PsiFn = Arc::new(move |x, z| {
        let (c, _) = c2.at(x);
        let drift: Vec<f64> = mu(x).iter().zip(&c).map(|(a, b)| a + b).collect();
        let s = sigma(x);
        let sw = linalg::mat_vec(&s, &z[1..1 + k], m, k);
        let f = jump_map(x, &z[1 + k..]);
        (0..m).map(|i| x[i] + drift[i] * z[0] + sw[i] + f[i]).collect()
    });
    let sde = GeometricalSde::new(m, GroupDescriptor::Additive(1 + k + d), psi);
    Ok((sde, corr))
}

/// Iterated random map `x ↦ map(x, Δz)`; identity and smoothness are not required.
pub fn from_iterated_map(state_dim: usize, group: GroupDescriptor, map: PsiFn) -> GeometricalSde {
    let mut s = GeometricalSde::new(state_dim, group, map);
    s.kind = SdeKind::IteratedMap;
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{
        gaussian_vec, sample, uniform_grid, CharacteristicTriplet, DriverKind, DriverSpec, IncrementSampler, JumpMeasure, Truncation,
    };
    use crate::rng::StosymRng;
    use crate::stats::mc_mean_ci;
    use proptest::prelude::*;

    fn gl2_r2() -> GroupDescriptor {
        GroupDescriptor::Product(vec![GroupDescriptor::GeneralLinear(2), GroupDescriptor::Additive(2)])
    }

    /// `Ψ(x, z) = z₁·x + z₂` with analytic derivatives.
    fn planar() -> GeometricalSde {
        let psi: PsiFn = Arc::new(|x, z| vec![z[0] * x[0] + z[1] * x[1] + z[4], z[2] * x[0] + z[3] * x[1] + z[5]]);
        let jx: JacFn = Arc::new(|_x, z| z[0..4].to_vec());
        let jz: JacFn = Arc::new(|x, _z| vec![x[0], x[1], 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, x[0], x[1], 0.0, 1.0]);
        GeometricalSde::new(2, gl2_r2(), psi).with_jac_x(jx).with_jac_z(jz).with_second_order(SecondOrder::Zero)
    }

    fn random_gl2_r2_path(seed: u64, steps: usize) -> CadlagPath {
        let sampler: IncrementSampler = Arc::new(|r: &mut StosymRng| {
            let mut v = gaussian_vec(r, 6, 0.2);
            v[0] += 1.0;
            v[3] += 1.0;
            v
        });
        sample(&DriverSpec { kind: DriverKind::DiscreteIid { sampler, group: gl2_r2() }, seed, grid: vec![0.0, steps as f64] }).unwrap()
    }

    #[test]
    fn constant_map_stays_put() {
        let sde = from_iterated_map(2, gl2_r2(), Arc::new(|x, _| x.to_vec()));
        let z = random_gl2_r2_path(1, 20);
        let x = solve_discrete(&sde, &z, &[0.3, -0.7]).unwrap();
        assert!(x.values.iter().all(|v| v == &vec![0.3, -0.7]));
    }

    #[test]
    fn affine_iterated_map_matches_recursion() {
        let sde = from_iterated_map(2, gl2_r2(), planar().psi_fn());
        let z = random_gl2_r2_path(2, 30);
        let x = solve_discrete(&sde, &z, &[1.0, 2.0]).unwrap();
        let g = gl2_r2();
        for s in 1..z.len() {
            let inc = g.jump_coords(&z.values[s], &z.values[s - 1]).unwrap();
            let prev = &x.values[s - 1];
            let expect = [inc[0] * prev[0] + inc[1] * prev[1] + inc[4], inc[2] * prev[0] + inc[3] * prev[1] + inc[5]];
            assert!(linalg::max_abs_diff(&x.values[s], &expect) < 1e-12);
        }
        assert_eq!(x.times, z.times);
    }

    #[test]
    fn planar_single_unit_jump() {
        let g = gl2_r2();
        let z = CadlagPath::new(
            PathSpace::Group(g.clone()),
            PathStyle::DiscreteJump,
            vec![0.0, 1.0],
            vec![g.identity_coords(), vec![1.0, 0.0, 0.0, 1.0, 0.5, -2.0]],
        )
        .unwrap();
        let x = solve_discrete(&planar(), &z, &[1.0, 1.0]).unwrap();
        assert_eq!(x.values[1], vec![1.5, -1.0]);
    }

    #[test]
    fn arma_three_steps() {
        let g = GroupDescriptor::Product(vec![GroupDescriptor::GeneralLinear(1), GroupDescriptor::Additive(1)]);
        let sde = from_iterated_map(1, g.clone(), Arc::new(|x, z| vec![z[0] * x[0] + z[1]]));
        let incs = [(0.5, 1.0), (2.0, -1.0), (-1.0, 0.25)];
        let mut vals = vec![g.identity_coords()];
        for (a, b) in incs {
            let next = g.mul_coords(&[a, b], vals.last().unwrap()).unwrap();
            vals.push(next);
        }
        let z = CadlagPath::new(PathSpace::Group(g), PathStyle::DiscreteJump, vec![0.0, 1.0, 2.0, 3.0], vals).unwrap();
        let x = solve_discrete(&sde, &z, &[2.0]).unwrap();
        // 2 → 0.5·2+1 = 2 → 2·2−1 = 3 → −1·3+0.25 = −2.75
        let got: Vec<f64> = x.values.iter().map(|v| v[0]).collect();
        for (a, b) in got.iter().zip([2.0, 2.0, 3.0, -2.75]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn iterated_map_rejected_on_grid() {
        let sde = from_iterated_map(1, GroupDescriptor::Additive(1), Arc::new(|x, _| x.to_vec()));
        let z = sample(&DriverSpec { kind: DriverKind::Brownian(1), seed: 0, grid: uniform_grid(1.0, 4) }).unwrap();
        assert!(matches!(solve_grid(&sde, &z, &[0.0]), Err(StosymError::Usage(_))));
    }

    #[test]
    fn missing_derivatives_without_fd() {
        let sde = GeometricalSde::new(1, GroupDescriptor::Additive(1), Arc::new(|x, z| vec![x[0] + z[0]])).without_finite_differences();
        let z = sample(&DriverSpec { kind: DriverKind::Brownian(1), seed: 0, grid: uniform_grid(1.0, 4) }).unwrap();
        assert!(matches!(solve_grid(&sde, &z, &[0.0]), Err(StosymError::Unsupported(_))));
    }

    #[test]
    fn constant_sigma_is_exact_translation() {
        let sigma: StateFn = Arc::new(|_| vec![1.0, 2.0, 0.5, -1.0]);
        let sde = from_affine(2, 2, sigma);
        let z = sample(&DriverSpec { kind: DriverKind::Brownian(2), seed: 4, grid: uniform_grid(1.0, 200) }).unwrap();
        let x = solve_grid(&sde, &z, &[0.1, 0.2]).unwrap();
        for s in 1..z.len() {
            let dw: Vec<f64> = (0..2).map(|a| z.values[s][a] - z.values[s - 1][a]).collect();
            let dx: Vec<f64> = (0..2).map(|i| x.values[s][i] - x.values[s - 1][i]).collect();
            let expect = [dw[0] + 2.0 * dw[1], 0.5 * dw[0] - dw[1]];
            assert!(linalg::max_abs_diff(&dx, &expect) < 1e-12);
        }
    }

    #[test]
    fn identity_sigma_translates_driver() {
        let sde = from_affine(2, 2, Arc::new(|_| linalg::identity(2)));
        let z = sample(&DriverSpec { kind: DriverKind::Brownian(2), seed: 5, grid: uniform_grid(1.0, 50) }).unwrap();
        let x = solve_grid(&sde, &z, &[1.0, -1.0]).unwrap();
        for (xv, zv) in x.values.iter().zip(&z.values) {
            assert!(linalg::max_abs_diff(xv, &[zv[0] + 1.0, zv[1] - 1.0]) < 1e-12);
        }
    }

    #[test]
    fn zero_driver_keeps_initial_state() {
        let sde = from_affine(1, 1, Arc::new(|x| vec![x[0]]));
        let z = CadlagPath::new(
            PathSpace::Group(GroupDescriptor::Additive(1)),
            PathStyle::GridSampled,
            uniform_grid(1.0, 10),
            vec![vec![0.0]; 11],
        )
        .unwrap();
        let x = solve_grid(&sde, &z, &[3.0]).unwrap();
        assert!(x.values.iter().all(|v| v[0] == 3.0));
    }

    #[test]
    fn linear_sde_construction() {
        let sde = from_affine(1, 1, Arc::new(|x| vec![x[0]]));
        assert_eq!(sde.eval(&[2.0], &[0.5]), vec![3.0]);
        assert_eq!(sde.jacobian_z(&[2.0], &[0.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn exponential_map_mean() {
        let psi: PsiFn = Arc::new(|x, z| vec![x[0] * z[0].exp()]);
        let jz: JacFn = Arc::new(|x, z| vec![x[0] * z[0].exp()]);
        let h: HessFn = Arc::new(|x| vec![x[0]]);
        let sde = GeometricalSde::new(1, GroupDescriptor::Additive(1), psi).with_jac_z(jz).with_second_order(SecondOrder::Analytic(h));
        let finals: Vec<f64> = (0..100_000u64)
            .map(|s| {
                let z = sample(&DriverSpec { kind: DriverKind::Brownian(1), seed: s, grid: uniform_grid(1.0, 100) }).unwrap();
                solve_grid(&sde, &z, &[1.0]).unwrap().final_value()[0]
            })
            .collect();
        let (m, se) = mc_mean_ci(&finals).unwrap();
        assert!((m - 0.5f64.exp()).abs() <= 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn affine_jump_terms_cancel() {
        // Along a jump-diffusion driver, each step of the affine solution is
        // σ(X_{ℓ−1})·(continuous part) + σ(X_{ℓ−})·(jump).
        let sigma: StateFn = Arc::new(|x| vec![1.0 + 0.5 * x[0].sin()]);
        let sde = from_affine(1, 1, sigma.clone());
        let triplet = CharacteristicTriplet {
            b0: vec![0.2],
            a0: vec![0.5],
            nu0: JumpMeasure::Finite { rate: 4.0, law: JumpLaw::Gaussian { mean: vec![0.0], std: 0.7 } },
            truncation: Truncation::UnitBall,
        };
        let z = sample(&DriverSpec { kind: DriverKind::LevyFinite(triplet), seed: 8, grid: uniform_grid(2.0, 100) }).unwrap();
        assert!(z.jumps.iter().flatten().count() > 0);
        let x = solve_grid(&sde, &z, &[0.3]).unwrap();
        for s in 1..z.len() {
            let j = z.jumps[s].as_ref().map(|v| v[0]).unwrap_or(0.0);
            let cont = z.values[s][0] - z.values[s - 1][0] - j;
            let prev = x.values[s - 1][0];
            let mid = prev + sigma(&[prev])[0] * cont;
            let expect = mid + sigma(&[mid])[0] * j;
            assert!((x.values[s][0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_levy_corrections() {
        let law = JumpLaw::UniformBox { lo: vec![-1.0], hi: vec![1.0] };
        let mu: StateFn = Arc::new(|_| vec![0.7]);
        let sigma: StateFn = Arc::new(|_| vec![1.0]);
        let zero: PsiFn = Arc::new(|_, _| vec![0.0]);
        let (_, c) = from_smooth_levy(1, mu.clone(), 1, sigma.clone(), zero, 1.0, &law, 1000, 1).unwrap();
        assert_eq!(c.at(&[0.0]).0, vec![0.0]);

        let lin: PsiFn = Arc::new(|_, z| vec![z[0]]);
        let (_, c) = from_smooth_levy(1, mu.clone(), 1, sigma.clone(), lin, 1.0, &law, 1000, 1).unwrap();
        assert!(c.at(&[0.0]).0[0].abs() < 1e-9);

        let sq: PsiFn = Arc::new(|_, z| vec![z[0] * z[0]]);
        let (sde, c) = from_smooth_levy(1, mu.clone(), 1, sigma.clone(), sq, 1.0, &law, 20_000, 1).unwrap();
        let (corr, se) = c.at(&[0.0]);
        assert!((corr[0] - 1.0 / 3.0).abs() <= 4.0 * se[0], "{corr:?} {se:?}");
        // Ψ(x, (1, 0, 0)) − x is the corrected drift.
        let v = sde.eval(&[0.0], &[1.0, 0.0, 0.0]);
        assert!((v[0] - 0.7 - corr[0]).abs() < 1e-12);

        let bad: PsiFn = Arc::new(|_, z| vec![z[0] + 1.0]);
        assert!(from_smooth_levy(1, mu, 1, sigma, bad, 1.0, &law, 10, 1).is_err());
    }

    #[test]
    fn control_is_frozen_per_run() {
        let fam: ControlledPsiFn = Arc::new(|k, x, z| vec![x[0] + k[0] * z[0]]);
        let sde = GeometricalSde::with_control(1, GroupDescriptor::Additive(1), fam, vec![3.0]);
        assert_eq!(sde.eval(&[1.0], &[2.0]), vec![7.0]);
        assert_eq!(sde.control, Some(vec![3.0]));
    }

    #[test]
    fn discrete_and_flagged_grid_agree() {
        let z = random_gl2_r2_path(9, 200);
        let sde = planar();
        let a = solve_discrete(&sde, &z, &[0.4, -1.1]).unwrap();
        let b = solve_grid(&sde, &z.as_grid_with_jump_flags().unwrap(), &[0.4, -1.1]).unwrap();
        for (u, v) in a.values.iter().zip(&b.values) {
            assert!(linalg::max_abs_diff(u, v) < 1e-10);
        }
    }

    #[test]
    fn linear_change_of_variables_transports_solutions() {
        let phi = [2.0, 1.0, -0.5, 1.5];
        let phi_inv = linalg::inverse(&phi, 2, 1e-12).unwrap();
        let base = planar();
        let psi = base.psi_fn();
        let moved: PsiFn = Arc::new(move |x, z| {
            let y = linalg::mat_vec(&phi_inv, x, 2, 2);
            linalg::mat_vec(&phi, &psi(&y, z), 2, 2)
        });
        let sde2 = GeometricalSde::new(2, gl2_r2(), moved);
        let z = random_gl2_r2_path(10, 100);
        let x0 = [0.3, 0.9];
        let a = solve_discrete(&base, &z, &x0).unwrap();
        let b = solve_discrete(&sde2, &z, &linalg::mat_vec(&phi, &x0, 2, 2)).unwrap();
        for (u, v) in a.values.iter().zip(&b.values) {
            let pu = linalg::mat_vec(&phi, u, 2, 2);
            assert!(linalg::max_abs_diff(&pu, v) <= 1e-10 * (1.0 + linalg::norm(v)));
        }
    }

    #[test]
    fn analytic_and_fd_derivatives_agree() {
        let sde = planar();
        let z = [1.1, 0.2, -0.3, 0.9, 0.4, 0.5];
        assert!(sde.derivative_agreement(&[0.7, -1.3], &z) < 1e-6);
        let exp_map = GeometricalSde::new(1, GroupDescriptor::Additive(1), Arc::new(|x: &[f64], z: &[f64]| vec![x[0] * z[0].exp()]));
        let h = exp_map.hessian_z_identity(&[2.0]).unwrap().unwrap();
        assert!((h[0] - 2.0).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn identity_law_for_constructed_sdes(seed in 0u64..1000) {
            let mut r = rng_from_seed(seed);
            let probes: Vec<Vec<f64>> = (0..100).map(|_| vec![rand::Rng::random_range(&mut r, -3.0..3.0), rand::Rng::random_range(&mut r, -3.0..3.0)]).collect();
            let aff = from_affine(2, 3, Arc::new(|x: &[f64]| vec![x[0], 1.0, x[1] * x[0], 0.5, x[1].sin(), 2.0]));
            prop_assert!(aff.identity_defect(&probes) <= 1e-12);
            let law = JumpLaw::Gaussian { mean: vec![0.0], std: 0.5 };
            let (lev, _) = from_smooth_levy(
                2,
                Arc::new(|x: &[f64]| vec![x[1], -x[0]]),
                1,
                Arc::new(|x: &[f64]| vec![x[0], 1.0]),
                Arc::new(|x: &[f64], z: &[f64]| vec![x[0] * z[0] * z[0], z[0].sin()]),
                2.0,
                &law,
                200,
                seed,
            ).unwrap();
            prop_assert!(lev.identity_defect(&probes) <= 1e-12);
        }
    }
}
