//! Stochastic transformations `(Φ, B, η)` and their generators `(Y, C, τ)`.
//!
//! `Φ` is a diffeomorphism of the state space, `B` a state-dependent gauge
//! element acting on driver increments through a [`GaugeAction`], and `η` a
//! positive time-change density acting through a [`TimeAction`] and the
//! random time change `H_β`.

use std::sync::Arc;

use crate::error::{check_dim, Result, StosymError};
use crate::lie_groups::GroupDescriptor;
use crate::linalg;
use crate::path::{CadlagPath, PathSpace, PathStyle};
use crate::sde::{central_jacobian, GeometricalSde, PsiFn, StateFn, FD_STEP};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// `(g, z) ↦ Ξ_g(z)`, with `g` a flat `k×k` matrix.
pub type ActFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
/// `(r, z) ↦ Γ_r(z)`.
pub type TimeActFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// Default lower bound for time-change densities.
pub const ETA_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaugeGroup {
    Orthogonal(usize),
    SpecialOrthogonal(usize),
    /// The one-element group, stored as the `1×1` matrix `[1]`.
    Trivial,
}

impl GaugeGroup {
    pub fn matrix_dim(&self) -> usize {
        match self {
            GaugeGroup::Orthogonal(k) | GaugeGroup::SpecialOrthogonal(k) => *k,
            GaugeGroup::Trivial => 1,
        }
    }

    /// Basis `E_{ji} − E_{ij}` (`i < j`) of the Lie algebra; empty for the trivial group.
    pub fn algebra_basis(&self) -> Vec<Vec<f64>> {
        let k = self.matrix_dim();
        if matches!(self, GaugeGroup::Trivial) {
            return Vec::new();
        }
        let mut out = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                let mut m = vec![0.0; k * k];
                m[j * k + i] = 1.0;
                m[i * k + j] = -1.0;
                out.push(m);
            }
        }
        out
    }

    /// Coefficients of an antisymmetric matrix against [`Self::algebra_basis`].
    pub fn coefficients(&self, c: &[f64]) -> Vec<f64> {
        let k = self.matrix_dim();
        let mut out = Vec::new();
        if matches!(self, GaugeGroup::Trivial) {
            return out;
        }
        for i in 0..k {
            for j in i + 1..k {
                out.push(c[j * k + i]);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionKind {
    /// `Ξ_g` is linear in the driver coordinates.
    Linear,
    /// Nonlinear but smooth; grid drivers use a second-order expansion.
    Smooth,
    /// No derivative information may be taken.
    Opaque,
}

/// Action `Ξ_g` of a matrix gauge group on the driver group.
#[derive(Clone)]
pub struct GaugeAction {
    pub name: String,
    pub group: GaugeGroup,
    pub driver: GroupDescriptor,
    pub kind: ActionKind,
    act: ActFn,
    /// `(C, z) ↦ Σ_ℓ C^ℓ K_ℓ(z)` for a Lie-algebra matrix `C`.
    infinitesimal: ActFn,
}

impl std::fmt::Debug for GaugeAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaugeAction")
            .field("name", &self.name)
            .field("group", &self.group)
            .field("driver", &self.driver)
            .field("kind", &self.kind)
            .finish()
    }
}

impl GaugeAction {
    pub fn new(name: &str, group: GaugeGroup, driver: GroupDescriptor, kind: ActionKind, act: ActFn, infinitesimal: ActFn) -> Self {
        Self { name: name.into(), group, driver, kind, act, infinitesimal }
    }

    pub fn act(&self, g: &[f64], z: &[f64]) -> Vec<f64> {
        (self.act)(g, z)
    }

    /// The generator field `C^ℓ K_ℓ(z)` for the algebra element `C`.
    pub fn generator_field(&self, c: &[f64], z: &[f64]) -> Vec<f64> {
        (self.infinitesimal)(c, z)
    }

    /// `K_ℓ(z)` for the `ℓ`-th basis element.
    pub fn generator(&self, l: usize, z: &[f64]) -> Vec<f64> {
        self.generator_field(&self.group.algebra_basis()[l], z)
    }

    /// Linearization `Υ_g` of `Ξ_g` at `1_N`, `n×n`.
    pub fn upsilon(&self, g: &[f64]) -> Vec<f64> {
        let id = self.driver.identity_coords();
        central_jacobian(|z| self.act(g, z), &id, id.len())
    }

    /// Trivial action of the one-element group.
    pub fn trivial(driver: GroupDescriptor) -> Self {
        let n = driver.coordinate_dim();
        Self::new(
            "trivial",
            GaugeGroup::Trivial,
            driver,
            ActionKind::Linear,
            Arc::new(|_, z| z.to_vec()),
            Arc::new(move |_, _| vec![0.0; n]),
        )
    }

    /// `Ξ_B(z) = B·z` on `ℝᵏ`.
    pub fn rotation(k: usize) -> Self {
        Self::new(
            "rotation",
            GaugeGroup::Orthogonal(k),
            GroupDescriptor::Additive(k),
            ActionKind::Linear,
            Arc::new(move |g, z| linalg::mat_vec(g, z, k, k)),
            Arc::new(move |c, z| linalg::mat_vec(c, z, k, k)),
        )
    }

    /// `Ξ_B(t, w) = (t, B·w)` on `ℝ^{1+k}` (Euler driver).
    pub fn rotation_with_clock(k: usize) -> Self {
        let lift = move |m: &[f64], z: &[f64], keep_t: bool| {
            let mut out = vec![if keep_t { z[0] } else { 0.0 }];
            out.extend(linalg::mat_vec(m, &z[1..], k, k));
            out
        };
        Self::new(
            "rotation_with_clock",
            GaugeGroup::Orthogonal(k),
            GroupDescriptor::Additive(1 + k),
            ActionKind::Linear,
            Arc::new(move |g, z| lift(g, z, true)),
            Arc::new(move |c, z| lift(c, z, false)),
        )
    }

    /// `Ξ_B(z₁, z₂) = (B z₁ Bᵀ, B z₂)` on `GL(k) × ℝᵏ`.
    pub fn conjugation(k: usize) -> Self {
        let driver = GroupDescriptor::Product(vec![GroupDescriptor::GeneralLinear(k), GroupDescriptor::Additive(k)]);
        Self::new(
            "conjugation",
            GaugeGroup::Orthogonal(k),
            driver,
            ActionKind::Linear,
            Arc::new(move |g, z| {
                let gt = linalg::transpose(g, k, k);
                let mut out = linalg::mat_mul(&linalg::mat_mul(g, &z[..k * k], k, k, k), &gt, k, k, k);
                out.extend(linalg::mat_vec(g, &z[k * k..], k, k));
                out
            }),
            Arc::new(move |c, z| {
                let ct = linalg::transpose(c, k, k);
                let a = linalg::mat_mul(c, &z[..k * k], k, k, k);
                let b = linalg::mat_mul(&z[..k * k], &ct, k, k, k);
                let mut out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
                out.extend(linalg::mat_vec(c, &z[k * k..], k, k));
                out
            }),
        )
    }

    /// `Ξ_B(A) = B A Bᵀ` on `GL(k)`.
    pub fn matrix_conjugation(k: usize) -> Self {
        Self::new(
            "matrix_conjugation",
            GaugeGroup::Orthogonal(k),
            GroupDescriptor::GeneralLinear(k),
            ActionKind::Linear,
            Arc::new(move |g, z| {
                let gt = linalg::transpose(g, k, k);
                linalg::mat_mul(&linalg::mat_mul(g, z, k, k, k), &gt, k, k, k)
            }),
            Arc::new(move |c, z| {
                let ct = linalg::transpose(c, k, k);
                let a = linalg::mat_mul(c, z, k, k, k);
                let b = linalg::mat_mul(z, &ct, k, k, k);
                a.iter().zip(&b).map(|(x, y)| x + y).collect()
            }),
        )
    }

    /// `Ξ_B(s, a, b) = (s, B a, B b Bᵀ)` on the Milstein group.
    pub fn milstein_rotation(k: usize) -> Self {
        Self::new(
            "milstein_rotation",
            GaugeGroup::Orthogonal(k),
            GroupDescriptor::Milstein(k),
            ActionKind::Linear,
            Arc::new(move |g, z| {
                let gt = linalg::transpose(g, k, k);
                let mut out = vec![z[0]];
                out.extend(linalg::mat_vec(g, &z[1..1 + k], k, k));
                out.extend(linalg::mat_mul(&linalg::mat_mul(g, &z[1 + k..], k, k, k), &gt, k, k, k));
                out
            }),
            Arc::new(move |c, z| {
                let ct = linalg::transpose(c, k, k);
                let mut out = vec![0.0];
                out.extend(linalg::mat_vec(c, &z[1..1 + k], k, k));
                let a = linalg::mat_mul(c, &z[1 + k..], k, k, k);
                let b = linalg::mat_mul(&z[1 + k..], &ct, k, k, k);
                out.extend(a.iter().zip(&b).map(|(x, y)| x + y));
                out
            }),
        )
    }

    /// Largest violation of `Ξ_1 = id`, `Ξ_g(1_N) = 1_N`, `Ξ_{gh} = Ξ_g Ξ_h`
    /// and of `Υ_g` against the directional derivatives of `Ξ_g`.
    pub fn law_defect(&self, gs: &[Vec<f64>], zs: &[Vec<f64>]) -> f64 {
        let k = self.group.matrix_dim();
        let id_g = linalg::identity(k);
        let id_n = self.driver.identity_coords();
        let n = id_n.len();
        let mut worst = 0.0f64;
        for z in zs {
            worst = worst.max(linalg::max_abs_diff(&self.act(&id_g, z), z));
        }
        for g in gs {
            worst = worst.max(linalg::max_abs_diff(&self.act(g, &id_n), &id_n));
            let ups = self.upsilon(g);
            for a in 0..n {
                let h = FD_STEP;
                let mut zp = id_n.clone();
                let mut zm = id_n.clone();
                zp[a] += h;
                zm[a] -= h;
                let (fp, fm) = (self.act(g, &zp), self.act(g, &zm));
                for i in 0..n {
                    worst = worst.max(((fp[i] - fm[i]) / (2.0 * h) - ups[i * n + a]).abs());
                }
            }
            for h in gs {
                let gh = linalg::mat_mul(g, h, k, k, k);
                for z in zs {
                    let lhs = self.act(&gh, z);
                    let rhs = self.act(g, &self.act(h, z));
                    worst = worst.max(linalg::max_abs_diff(&lhs, &rhs));
                }
            }
        }
        worst
    }
}

/// Action `Γ_r` of `(ℝ₊, ·)` on the driver group.
#[derive(Clone)]
pub struct TimeAction {
    pub name: String,
    pub driver: GroupDescriptor,
    act: TimeActFn,
}

impl std::fmt::Debug for TimeAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TimeAction").field("name", &self.name).field("driver", &self.driver).finish()
    }
}

impl TimeAction {
    pub fn new(name: &str, driver: GroupDescriptor, act: TimeActFn) -> Self {
        Self { name: name.into(), driver, act }
    }

    pub fn act(&self, r: f64, z: &[f64]) -> Vec<f64> {
        (self.act)(r, z)
    }

    /// `H(z) = ∂_r Γ_r(z)` at `r = 1`.
    pub fn generator(&self, z: &[f64]) -> Vec<f64> {
        let h = FD_STEP;
        let p = self.act(1.0 + h, z);
        let m = self.act(1.0 - h, z);
        p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }

    /// Linearization `γ_r` at `1_N`.
    pub fn gamma(&self, r: f64) -> Vec<f64> {
        let id = self.driver.identity_coords();
        central_jacobian(|z| self.act(r, z), &id, id.len())
    }

    /// `Γ_r(z) = r^p z` on `ℝⁿ`.
    pub fn power_scaling(n: usize, p: f64) -> Self {
        Self::new(
            &format!("power_scaling({p})"),
            GroupDescriptor::Additive(n),
            Arc::new(move |r, z| z.iter().map(|v| r.powf(p) * v).collect()),
        )
    }

    /// `Γ_r(t, w) = (r t, √r w)` on `ℝ^{1+k}`.
    pub fn clock_scaling(k: usize) -> Self {
        Self::new(
            "clock_scaling",
            GroupDescriptor::Additive(1 + k),
            Arc::new(|r, z| {
                let mut out = vec![r * z[0]];
                out.extend(z[1..].iter().map(|v| r.sqrt() * v));
                out
            }),
        )
    }

    /// `Γ_r(s, a, b) = (r s, √r a, r b)` on the Milstein group.
    pub fn milstein_scaling(k: usize) -> Self {
        Self::new(
            "milstein_scaling",
            GroupDescriptor::Milstein(k),
            Arc::new(move |r, z| {
                let mut out = vec![r * z[0]];
                out.extend(z[1..1 + k].iter().map(|v| r.sqrt() * v));
                out.extend(z[1 + k..].iter().map(|v| r * v));
                out
            }),
        )
    }

    /// Largest violation of `Γ_1 = id` and `Γ_{rs} = Γ_r Γ_s`.
    pub fn law_defect(&self, rs: &[f64], zs: &[Vec<f64>]) -> f64 {
        let mut worst = 0.0f64;
        for z in zs {
            worst = worst.max(linalg::max_abs_diff(&self.act(1.0, z), z));
            for &r in rs {
                for &s in rs {
                    let lhs = self.act(r * s, z);
                    let rhs = self.act(r, &self.act(s, z));
                    worst = worst.max(linalg::max_abs_diff(&lhs, &rhs));
                }
            }
        }
        worst
    }
}

/// Largest `|Ξ_g Γ_r z − Γ_r Ξ_g z|` over the samples.
pub fn commutation_defect(gauge: &GaugeAction, time: &TimeAction, gs: &[Vec<f64>], rs: &[f64], zs: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for g in gs {
        for &r in rs {
            for z in zs {
                let a = gauge.act(g, &time.act(r, z));
                let b = time.act(r, &gauge.act(g, z));
                worst = worst.max(linalg::max_abs_diff(&a, &b));
            }
        }
    }
    worst
}

/// Finite transformation `T = (Φ, B, η)`.
#[derive(Clone)]
pub struct StochasticTransformation {
    pub state_dim: usize,
    /// Matrix size `k` of the gauge elements `B(x)`.
    pub gauge_dim: usize,
    phi: StateFn,
    phi_inv: Option<StateFn>,
    phi_jac: Option<StateFn>,
    b: StateFn,
    eta: ScalarFn,
}

impl StochasticTransformation {
    pub fn new(state_dim: usize, gauge_dim: usize, phi: StateFn, phi_inv: Option<StateFn>, b: StateFn, eta: ScalarFn) -> Self {
        Self { state_dim, gauge_dim, phi, phi_inv, phi_jac: None, b, eta }
    }

    pub fn with_jacobian(mut self, jac: StateFn) -> Self {
        self.phi_jac = Some(jac);
        self
    }

    pub fn identity(state_dim: usize, gauge_dim: usize) -> Self {
        let id: StateFn = Arc::new(|x| x.to_vec());
        Self::new(state_dim, gauge_dim, id.clone(), Some(id), Arc::new(move |_| linalg::identity(gauge_dim)), Arc::new(|_| 1.0))
            .with_jacobian(Arc::new(move |_| linalg::identity(state_dim)))
    }

    /// `Φ(x) = A·x` with constant gauge part and `η ≡ 1`.
    pub fn linear(a: Vec<f64>, state_dim: usize, gauge_dim: usize, b: Vec<f64>) -> Result<Self> {
        let inv = linalg::inverse(&a, state_dim, 1e-12)?;
        let m = state_dim;
        let a1 = a.clone();
        Ok(Self::new(
            m,
            gauge_dim,
            Arc::new(move |x| linalg::mat_vec(&a1, x, m, m)),
            Some(Arc::new(move |x| linalg::mat_vec(&inv, x, m, m))),
            Arc::new(move |_| b.clone()),
            Arc::new(|_| 1.0),
        )
        .with_jacobian(Arc::new(move |_| a.clone())))
    }

    pub fn phi(&self, x: &[f64]) -> Vec<f64> {
        (self.phi)(x)
    }

    pub fn phi_inv(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.phi_inv {
            Some(f) => Ok(f(x)),
            None => Err(StosymError::Usage("inverse of Φ was not supplied".into())),
        }
    }

    pub fn has_inverse(&self) -> bool {
        self.phi_inv.is_some()
    }

    pub fn phi_jacobian(&self, x: &[f64]) -> Vec<f64> {
        match &self.phi_jac {
            Some(j) => j(x),
            None => central_jacobian(|p| self.phi(p), x, self.state_dim),
        }
    }

    pub fn b(&self, x: &[f64]) -> Vec<f64> {
        (self.b)(x)
    }

    pub fn eta(&self, x: &[f64]) -> f64 {
        (self.eta)(x)
    }

    /// Largest `|Φ(Φ⁻¹(x)) − x|`, `|Φ⁻¹(Φ(x)) − x|` over the probes.
    pub fn round_trip_defect(&self, probes: &[Vec<f64>]) -> Result<f64> {
        let mut worst = 0.0f64;
        for x in probes {
            worst = worst.max(linalg::max_abs_diff(&self.phi(&self.phi_inv(x)?), x));
            worst = worst.max(linalg::max_abs_diff(&self.phi_inv(&self.phi(x))?, x));
        }
        Ok(worst)
    }

    /// Largest pointwise gap between two transformations on the probes.
    pub fn distance(&self, other: &StochasticTransformation, probes: &[Vec<f64>]) -> f64 {
        probes
            .iter()
            .map(|x| {
                linalg::max_abs_diff(&self.phi(x), &other.phi(x))
                    .max(linalg::max_abs_diff(&self.b(x), &other.b(x)))
                    .max((self.eta(x) - other.eta(x)).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Generator `V = (Y, C, τ)`; `C(x)` is a `k×k` Lie-algebra matrix.
#[derive(Clone)]
pub struct InfinitesimalStochasticTransformation {
    pub state_dim: usize,
    pub gauge_dim: usize,
    y: StateFn,
    y_jac: Option<StateFn>,
    c: StateFn,
    tau: ScalarFn,
}

pub type InfinitesimalTransformation = InfinitesimalStochasticTransformation;

impl InfinitesimalStochasticTransformation {
    pub fn new(state_dim: usize, gauge_dim: usize, y: StateFn, c: StateFn, tau: ScalarFn) -> Self {
        Self { state_dim, gauge_dim, y, y_jac: None, c, tau }
    }

    pub fn with_jacobian(mut self, jac: StateFn) -> Self {
        self.y_jac = Some(jac);
        self
    }

    pub fn zero(state_dim: usize, gauge_dim: usize) -> Self {
        Self::new(
            state_dim,
            gauge_dim,
            Arc::new(move |_| vec![0.0; state_dim]),
            Arc::new(move |_| vec![0.0; gauge_dim * gauge_dim]),
            Arc::new(|_| 0.0),
        )
        .with_jacobian(Arc::new(move |_| vec![0.0; state_dim * state_dim]))
    }

    pub fn y(&self, x: &[f64]) -> Vec<f64> {
        (self.y)(x)
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.y_jac.is_some()
    }

    pub fn y_jacobian(&self, x: &[f64]) -> Vec<f64> {
        match &self.y_jac {
            Some(j) => j(x),
            None => central_jacobian(|p| self.y(p), x, self.state_dim),
        }
    }

    pub fn c(&self, x: &[f64]) -> Vec<f64> {
        (self.c)(x)
    }

    pub fn tau(&self, x: &[f64]) -> f64 {
        (self.tau)(x)
    }

    pub fn y_fn(&self) -> StateFn {
        self.y.clone()
    }

    /// Largest component gap between two generators on the probes.
    pub fn distance(&self, other: &InfinitesimalStochasticTransformation, probes: &[Vec<f64>]) -> f64 {
        probes
            .iter()
            .map(|x| {
                linalg::max_abs_diff(&self.y(x), &other.y(x))
                    .max(linalg::max_abs_diff(&self.c(x), &other.c(x)))
                    .max((self.tau(x) - other.tau(x)).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Central derivative of `f` at `x` in the direction `v`.
pub fn directional_derivative(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], v: &[f64]) -> Vec<f64> {
    let vn = linalg::norm(v);
    if vn == 0.0 {
        return vec![0.0; f(x).len()];
    }
    let h = FD_STEP * linalg::norm(x).max(1.0) / vn;
    let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let (fp, fm) = (f(&xp), f(&xm));
    fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

/// `T₂ ∘ T₁ = (Φ₂∘Φ₁, (B₂∘Φ₁)·B₁, (η₂∘Φ₁)·η₁)`.
pub fn compose(t2: &StochasticTransformation, t1: &StochasticTransformation) -> StochasticTransformation {
    let k = t1.gauge_dim;
    let (a, b) = (t2.clone(), t1.clone());
    let phi: StateFn = {
        let (a, b) = (a.clone(), b.clone());
        Arc::new(move |x| a.phi(&b.phi(x)))
    };
    let phi_inv: Option<StateFn> = match (&t1.phi_inv, &t2.phi_inv) {
        (Some(_), Some(_)) => {
            let (a, b) = (a.clone(), b.clone());
            Some(Arc::new(move |x| b.phi_inv(&a.phi_inv(x).unwrap()).unwrap()))
        }
        _ => None,
    };
    let bf: StateFn = {
        let (a, b) = (a.clone(), b.clone());
        Arc::new(move |x| linalg::mat_mul(&a.b(&b.phi(x)), &b.b(x), k, k, k))
    };
    let eta: ScalarFn = {
        let (a, b) = (a.clone(), b.clone());
        Arc::new(move |x| a.eta(&b.phi(x)) * b.eta(x))
    };
    let mut out = StochasticTransformation::new(t1.state_dim, k, phi, phi_inv, bf, eta);
    if t1.phi_jac.is_some() && t2.phi_jac.is_some() {
        let m = t1.state_dim;
        out = out.with_jacobian(Arc::new(move |x| linalg::mat_mul(&a.phi_jacobian(&b.phi(x)), &b.phi_jacobian(x), m, m, m)));
    }
    out
}

/// `T⁻¹ = (Φ⁻¹, (B∘Φ⁻¹)⁻¹, 1/(η∘Φ⁻¹))`.
pub fn invert(t: &StochasticTransformation) -> Result<StochasticTransformation> {
    let inv = t.phi_inv.clone().ok_or_else(|| StosymError::Usage("cannot invert: Φ⁻¹ not supplied".into()))?;
    let k = t.gauge_dim;
    let (t1, t2) = (t.clone(), t.clone());
    let (i1, i2) = (inv.clone(), inv.clone());
    Ok(StochasticTransformation::new(
        t.state_dim,
        k,
        inv,
        Some(t.phi.clone()),
        Arc::new(move |x| {
            let b = t1.b(&i1(x));
            linalg::inverse(&b, k, 0.0).unwrap_or_else(|_| vec![f64::NAN; k * k])
        }),
        Arc::new(move |x| 1.0 / t2.eta(&i2(x))),
    ))
}

/// `[V₁, V₂] = ([Y₁,Y₂], Y₁(C₂) − Y₂(C₁) − [C₁,C₂], Y₁(τ₂) − Y₂(τ₁))`
/// with `[Y₁,Y₂] = Y₁·∇Y₂ − Y₂·∇Y₁` and `[C₁,C₂] = C₁C₂ − C₂C₁`.
pub fn bracket(
    v1: &InfinitesimalStochasticTransformation,
    v2: &InfinitesimalStochasticTransformation,
) -> InfinitesimalStochasticTransformation {
    let m = v1.state_dim;
    let k = v1.gauge_dim;
    let (a, b) = (v1.clone(), v2.clone());
    let y: StateFn = {
        let (a, b) = (a.clone(), b.clone());
        Arc::new(move |x| {
            let j1 = a.y_jacobian(x);
            let j2 = b.y_jacobian(x);
            let t1 = linalg::mat_vec(&j2, &a.y(x), m, m);
            let t2 = linalg::mat_vec(&j1, &b.y(x), m, m);
            t1.iter().zip(&t2).map(|(p, q)| p - q).collect()
        })
    };
    let c: StateFn = {
        let (a, b) = (a.clone(), b.clone());
        Arc::new(move |x| {
            let y1c2 = directional_derivative(|p| b.c(p), x, &a.y(x));
            let y2c1 = directional_derivative(|p| a.c(p), x, &b.y(x));
            let comm = linalg::commutator(&a.c(x), &b.c(x), k);
            (0..k * k).map(|i| y1c2[i] - y2c1[i] - comm[i]).collect()
        })
    };
    let tau: ScalarFn = Arc::new(move |x| {
        let y1t2 = directional_derivative(|p| vec![b.tau(p)], x, &a.y(x))[0];
        let y2t1 = directional_derivative(|p| vec![a.tau(p)], x, &b.y(x))[0];
        y1t2 - y2t1
    });
    InfinitesimalStochasticTransformation::new(m, k, y, c, tau)
}

/// `T_*(V) = (Φ_*Y, (B C B⁻¹ + Y(B) B⁻¹)∘Φ⁻¹, (τ + Y(η)/η)∘Φ⁻¹)`.
pub fn push_forward(
    t: &StochasticTransformation,
    v: &InfinitesimalStochasticTransformation,
) -> Result<InfinitesimalStochasticTransformation> {
    if !t.has_inverse() {
        return Err(StosymError::Usage("push_forward needs Φ⁻¹".into()));
    }
    let m = t.state_dim;
    let k = t.gauge_dim;
    let (t1, v1) = (t.clone(), v.clone());
    let y: StateFn = Arc::new(move |x| {
        let p = t1.phi_inv(x).unwrap();
        linalg::mat_vec(&t1.phi_jacobian(&p), &v1.y(&p), m, m)
    });
    let (t2, v2) = (t.clone(), v.clone());
    let c: StateFn = Arc::new(move |x| {
        let p = t2.phi_inv(x).unwrap();
        let b = t2.b(&p);
        let b_inv = linalg::inverse(&b, k, 0.0).unwrap_or_else(|_| vec![f64::NAN; k * k]);
        let ad = linalg::mat_mul(&linalg::mat_mul(&b, &v2.c(&p), k, k, k), &b_inv, k, k, k);
        let yb = directional_derivative(|q| t2.b(q), &p, &v2.y(&p));
        let right = linalg::mat_mul(&yb, &b_inv, k, k, k);
        ad.iter().zip(&right).map(|(a, r)| a + r).collect()
    });
    let (t3, v3) = (t.clone(), v.clone());
    let tau: ScalarFn = Arc::new(move |x| {
        let p = t3.phi_inv(x).unwrap();
        let yeta = directional_derivative(|q| vec![t3.eta(q)], &p, &v3.y(&p))[0];
        v3.tau(&p) + yeta / t3.eta(&p)
    });
    Ok(InfinitesimalStochasticTransformation::new(m, k, y, c, tau))
}

#[derive(Clone, Copy, Debug)]
pub struct FlowConfig {
    /// RK4 steps per unit of flow parameter; at least this many steps are always used.
    pub steps_per_unit: usize,
    /// Any state norm above this aborts the integration.
    pub blowup: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { steps_per_unit: 1000, blowup: 1e8 }
    }
}

impl FlowConfig {
    pub fn steps_for(&self, a: f64) -> usize {
        ((self.steps_per_unit as f64) * a.abs().max(1.0)).ceil() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub phi: Vec<f64>,
    pub b: Vec<f64>,
    pub eta: f64,
}

/// Integrates `Φ' = Y(Φ)`, `B' = C(Φ)·B`, `η' = τ(Φ)·η` from `(x, I, 1)` over `[0, a]`.
pub fn flow_point_steps(v: &InfinitesimalStochasticTransformation, a: f64, x: &[f64], steps: usize, blowup: f64) -> Result<FlowState> {
    let m = v.state_dim;
    let k = v.gauge_dim;
    check_dim(m, x.len())?;
    let rhs = |s: &[f64]| -> Vec<f64> {
        let p = &s[..m];
        let b = &s[m..m + k * k];
        let eta = s[m + k * k];
        let mut out = v.y(p);
        out.extend(linalg::mat_mul(&v.c(p), b, k, k, k));
        out.push(v.tau(p) * eta);
        out
    };
    let mut s = x.to_vec();
    s.extend(linalg::identity(k));
    s.push(1.0);
    let h = a / steps as f64;
    let axpy = |s: &[f64], d: &[f64], c: f64| -> Vec<f64> { s.iter().zip(d).map(|(p, q)| p + c * q).collect() };
    for _ in 0..steps {
        let k1 = rhs(&s);
        let k2 = rhs(&axpy(&s, &k1, h / 2.0));
        let k3 = rhs(&axpy(&s, &k2, h / 2.0));
        let k4 = rhs(&axpy(&s, &k3, h));
        for i in 0..s.len() {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let nrm = linalg::norm(&s);
        if !(nrm <= blowup) {
            return Err(StosymError::Domain(format!("flow left the domain (|state| = {nrm:e})")));
        }
    }
    Ok(FlowState { phi: s[..m].to_vec(), b: s[m..m + k * k].to_vec(), eta: s[m + k * k] })
}

pub fn flow_point(v: &InfinitesimalStochasticTransformation, a: f64, x: &[f64], cfg: &FlowConfig) -> Result<FlowState> {
    flow_point_steps(v, a, x, cfg.steps_for(a), cfg.blowup)
}

/// Gap between integrations with `n` and `2n` steps.
pub fn flow_self_check(v: &InfinitesimalStochasticTransformation, a: f64, x: &[f64], cfg: &FlowConfig) -> Result<f64> {
    let n = cfg.steps_for(a);
    let p = flow_point_steps(v, a, x, n, cfg.blowup)?;
    let q = flow_point_steps(v, a, x, 2 * n, cfg.blowup)?;
    Ok(linalg::max_abs_diff(&p.phi, &q.phi).max(linalg::max_abs_diff(&p.b, &q.b)).max((p.eta - q.eta).abs()))
}

/// The time-`a` map of the flow of `V`, evaluated lazily. Points where the
/// integration blows up evaluate to NaN; use [`flow_point`] to get the error.
pub fn flow(v: &InfinitesimalStochasticTransformation, a: f64, cfg: &FlowConfig) -> StochasticTransformation {
    let m = v.state_dim;
    let k = v.gauge_dim;
    let nan_state = move || FlowState { phi: vec![f64::NAN; m], b: vec![f64::NAN; k * k], eta: f64::NAN };
    let (v1, v2, v3, v4) = (v.clone(), v.clone(), v.clone(), v.clone());
    let (c1, c2, c3, c4) = (*cfg, *cfg, *cfg, *cfg);
    StochasticTransformation::new(
        m,
        k,
        Arc::new(move |x| flow_point(&v1, a, x, &c1).unwrap_or_else(|_| nan_state()).phi),
        Some(Arc::new(move |x| flow_point(&v2, -a, x, &c2).unwrap_or_else(|_| nan_state()).phi)),
        Arc::new(move |x| flow_point(&v3, a, x, &c3).unwrap_or_else(|_| nan_state()).b),
        Arc::new(move |x| flow_point(&v4, a, x, &c4).unwrap_or_else(|_| nan_state()).eta),
    )
}

/// `E_T(Ψ)(x, z) = Φ(Ψ(Φ⁻¹x, Γ_{1/η(Φ⁻¹x)} Ξ_{B(Φ⁻¹x)⁻¹} z))`.
///
/// Without a time action the `Γ` factor is skipped, which is only meaningful
/// for `η ≡ 1`.
pub fn apply_e(
    t: &StochasticTransformation,
    sde: &GeometricalSde,
    gauge: &GaugeAction,
    time: Option<&TimeAction>,
) -> Result<GeometricalSde> {
    if !t.has_inverse() {
        return Err(StosymError::Usage("E_T needs Φ⁻¹".into()));
    }
    if gauge.driver != sde.driver {
        return Err(StosymError::DescriptorMismatch("gauge action and SDE drivers differ".into()));
    }
    let k = t.gauge_dim;
    let (t1, psi, g1, tm) = (t.clone(), sde.psi_fn(), gauge.clone(), time.cloned());
    let new_psi: PsiFn = Arc::new(move |x, z| {
        let y = t1.phi_inv(x).unwrap();
        let b_inv = linalg::inverse(&t1.b(&y), k, 0.0).unwrap_or_else(|_| vec![f64::NAN; k * k]);
        let mut zz = g1.act(&b_inv, z);
        if let Some(ta) = &tm {
            zz = ta.act(1.0 / t1.eta(&y), &zz);
        }
        t1.phi(&psi(&y, &zz))
    });
    let mut out = GeometricalSde::new(sde.state_dim, sde.driver.clone(), new_psi);
    out.kind = sde.kind;
    Ok(out)
}

/// Random time change `H_β`: the output knots are `β(t_ℓ) = Σ η_j Δt_j` and
/// carry the input values, so the output at time `s` is the input at `α_s`.
pub fn time_change(x: &CadlagPath, eta_per_step: &[f64], floor: f64) -> Result<CadlagPath> {
    check_dim(x.steps(), eta_per_step.len())?;
    if let Some(bad) = eta_per_step.iter().find(|e| !(**e >= floor)) {
        return Err(StosymError::InvalidParameter(format!("time-change density {bad} below floor {floor}")));
    }
    let mut times = Vec::with_capacity(x.len());
    times.push(0.0);
    for (s, eta) in eta_per_step.iter().enumerate() {
        let dt = x.times[s + 1] - x.times[s];
        times.push(times[s] + eta * dt);
    }
    Ok(CadlagPath { times, ..x.clone() })
}

/// Second-order image of a small increment under a smooth action:
/// `1_N + DΞ_g(1)·δ + ½ D²Ξ_g(1)[δ, δ]`, returned in coordinates.
fn smooth_increment(action: &GaugeAction, g: &[f64], inc: &[f64]) -> Vec<f64> {
    let id = action.driver.identity_coords();
    let delta: Vec<f64> = inc.iter().zip(&id).map(|(a, b)| a - b).collect();
    let dn = linalg::norm(&delta);
    if dn == 0.0 {
        return id;
    }
    // Along the ray s ↦ Ξ_g(1 + s·δ) the first and second derivatives at s = 0
    // give exactly DΞ·δ and D²Ξ[δ,δ].
    let h = 1e-4 / dn.max(1e-300);
    let at = |s: f64| -> Vec<f64> {
        let z: Vec<f64> = id.iter().zip(&delta).map(|(a, d)| a + s * d).collect();
        action.act(g, &z)
    };
    let (fp, f0, fm) = (at(h), at(0.0), at(-h));
    (0..id.len()).map(|i| f0[i] + (fp[i] - fm[i]) / (2.0 * h) + 0.5 * (fp[i] - 2.0 * f0[i] + fm[i]) / (h * h)).collect()
}

/// Transforms each increment of `z` by `f(step, ΔZ)` (jumps exactly, continuous
/// motion per the action kind) and recomposes `Z'_ℓ = ΔZ'_ℓ · Z'_{ℓ−1}`.
fn map_increments(
    z: &CadlagPath,
    action: &GaugeAction,
    mut pre: impl FnMut(usize, &[f64]) -> Result<(Vec<f64>, Option<f64>)>,
    time: Option<&TimeAction>,
) -> Result<CadlagPath> {
    let g = match &z.space {
        PathSpace::Group(g) if *g == action.driver => g.clone(),
        other => return Err(StosymError::DescriptorMismatch(format!("path on {other:?}, action on {:?}", action.driver))),
    };
    let grid = z.style == PathStyle::GridSampled;
    if grid && action.kind == ActionKind::Opaque {
        return Err(StosymError::Unsupported("nonlinear gauge action without derivative data on a grid-sampled driver".into()));
    }
    let transform = |g_el: &[f64], r: Option<f64>, inc: &[f64], exact: bool| -> Vec<f64> {
        let scaled = match (time, r) {
            (Some(ta), Some(r)) => ta.act(r, inc),
            _ => inc.to_vec(),
        };
        if exact || action.kind == ActionKind::Linear {
            action.act(g_el, &scaled)
        } else {
            smooth_increment(action, g_el, &scaled)
        }
    };
    let mut values = vec![z.values[0].clone()];
    let mut jumps = vec![None];
    for s in 1..z.len() {
        let (g_el, r) = pre(s, &z.values[s - 1])?;
        let full = z.increment(s)?;
        let (new_inc, new_jump) = if grid {
            match &z.jumps[s] {
                Some(j) => {
                    let before = g.mul_coords(&g.inv_coords(j)?, &z.values[s])?;
                    let cont = g.jump_coords(&before, &z.values[s - 1])?;
                    let cj = transform(&g_el, r, &cont, false);
                    let jj = transform(&g_el, r, j, true);
                    (g.mul_coords(&jj, &cj)?, Some(jj))
                }
                None => (transform(&g_el, r, &full, false), None),
            }
        } else {
            let inc = transform(&g_el, r, &full, true);
            (inc.clone(), Some(inc))
        };
        let next = g.mul_coords(&new_inc, &values[s - 1])?;
        values.push(next);
        jumps.push(new_jump);
    }
    Ok(CadlagPath { space: z.space.clone(), style: z.style, times: z.times.clone(), values, jumps })
}

/// `Z̃` with `ΔZ̃_ℓ = Ξ_{G_ℓ}(ΔZ_ℓ)`; `g_steps[ℓ−1]` is used on step `ℓ` and must
/// depend only on information strictly before `t_ℓ`.
pub fn apply_gauge(action: &GaugeAction, g_steps: &[Vec<f64>], z: &CadlagPath) -> Result<CadlagPath> {
    check_dim(z.steps(), g_steps.len())?;
    map_increments(z, action, |s, _| Ok((g_steps[s - 1].clone(), None)), None)
}

/// `P_T(X, Z)`: `B` and `η` are read at the pre-step state `X_{ℓ−1}`, the
/// increments become `Ξ_B(Γ_η(ΔZ))`, the state becomes `Φ(X)`, and both paths are
/// time-changed by `β = ∫ η(X_s) ds`.
pub fn apply_p(
    t: &StochasticTransformation,
    x: &CadlagPath,
    z: &CadlagPath,
    gauge: &GaugeAction,
    time: Option<&TimeAction>,
) -> Result<(CadlagPath, CadlagPath)> {
    if x.times != z.times {
        return Err(StosymError::InvalidParameter("state and driver paths must share knots".into()));
    }
    let mut etas = Vec::with_capacity(x.steps());
    let zp = map_increments(
        z,
        gauge,
        |s, _| {
            let y = &x.values[s - 1];
            let eta = t.eta(y);
            if time.is_none() && (eta - 1.0).abs() > 1e-12 {
                return Err(StosymError::Usage("η ≠ 1 requires a time action".into()));
            }
            etas.push(eta);
            Ok((t.b(y), Some(eta)))
        },
        time,
    )?;
    let xp_values: Vec<Vec<f64>> = x.values.iter().map(|v| t.phi(v)).collect();
    let xp = CadlagPath { values: xp_values, ..x.clone() };
    Ok((time_change(&xp, &etas, ETA_FLOOR)?, time_change(&zp, &etas, ETA_FLOOR)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{sample, uniform_grid, DriverKind, DriverSpec};
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn rot_field() -> InfinitesimalStochasticTransformation {
        let r = vec![0.0, -1.0, 1.0, 0.0];
        InfinitesimalStochasticTransformation::new(2, 2, Arc::new(|x| vec![-x[1], x[0]]), Arc::new(move |_| r.clone()), Arc::new(|_| 0.0))
    }

    fn probes(seed: u64, n: usize, m: usize) -> Vec<Vec<f64>> {
        let mut r = rng_from_seed(seed);
        (0..n).map(|_| (0..m).map(|_| r.random_range(-1.5..1.5)).collect()).collect()
    }

    #[test]
    fn builtin_actions_satisfy_group_laws() {
        let gs: Vec<Vec<f64>> = [0.3, -1.2, 2.0].iter().map(|a| linalg::rotation2(*a)).collect();
        let zs = probes(1, 5, 6);
        assert!(GaugeAction::conjugation(2).law_defect(&gs, &zs) < 1e-6);
        let z2 = probes(2, 5, 2);
        assert!(GaugeAction::rotation(2).law_defect(&gs, &z2) < 1e-6);
        let z3 = probes(3, 5, 7);
        assert!(GaugeAction::milstein_rotation(2).law_defect(&gs, &z3) < 1e-6);
        let z4 = probes(4, 5, 3);
        assert!(GaugeAction::rotation_with_clock(2).law_defect(&gs, &z4) < 1e-6);
        let rs = [0.5, 2.0, 3.0];
        assert!(TimeAction::clock_scaling(2).law_defect(&rs, &z4) < 1e-12);
        assert!(TimeAction::milstein_scaling(2).law_defect(&rs, &z3) < 1e-12);
        assert!(commutation_defect(&GaugeAction::milstein_rotation(2), &TimeAction::milstein_scaling(2), &gs, &rs, &z3) < 1e-12);
        assert!(commutation_defect(&GaugeAction::rotation_with_clock(2), &TimeAction::clock_scaling(2), &gs, &rs, &z4) < 1e-12);
    }

    #[test]
    fn generator_matches_derivative_of_action() {
        let act = GaugeAction::conjugation(2);
        let z = vec![1.2, 0.3, -0.4, 0.8, 0.5, -1.0];
        let k0 = act.generator(0, &z);
        let h = 1e-6;
        let p = act.act(&linalg::rotation2(h), &z);
        let m = act.act(&linalg::rotation2(-h), &z);
        for i in 0..6 {
            assert!(((p[i] - m[i]) / (2.0 * h) - k0[i]).abs() < 1e-8);
        }
        let g = GaugeGroup::SpecialOrthogonal(3);
        assert_eq!(g.algebra_basis().len(), 3);
        assert_eq!(g.coefficients(&g.algebra_basis()[1]), vec![0.0, 1.0, 0.0]);
        assert!((TimeAction::power_scaling(1, 0.5).generator(&[2.0])[0] - 1.0).abs() < 1e-9);
        assert!((TimeAction::power_scaling(2, 0.5).gamma(4.0)[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn identity_gauge_leaves_path() {
        let z = sample(&DriverSpec { kind: DriverKind::Brownian(2), seed: 1, grid: uniform_grid(1.0, 20) }).unwrap();
        let out = apply_gauge(&GaugeAction::rotation(2), &vec![linalg::identity(2); 20], &z).unwrap();
        for (a, b) in out.values.iter().zip(&z.values) {
            assert!(linalg::max_abs_diff(a, b) < 1e-14);
        }
    }

    #[test]
    fn constant_rotation_of_increments() {
        let z = sample(&DriverSpec { kind: DriverKind::Brownian(2), seed: 2, grid: uniform_grid(1.0, 30) }).unwrap();
        let b = linalg::rotation2(0.9);
        let out = apply_gauge(&GaugeAction::rotation(2), &vec![b.clone(); 30], &z).unwrap();
        for s in 0..z.len() {
            let expect = linalg::mat_vec(&b, &z.values[s], 2, 2);
            assert!(linalg::max_abs_diff(&out.values[s], &expect) < 1e-12);
        }
    }

    #[test]
    fn conjugation_of_one_jump() {
        let g = GroupDescriptor::Product(vec![GroupDescriptor::GeneralLinear(2), GroupDescriptor::Additive(2)]);
        let z1 = vec![1.1, 0.2, -0.3, 0.9, 0.5, -0.7];
        let z =
            CadlagPath::new(PathSpace::Group(g.clone()), PathStyle::DiscreteJump, vec![0.0, 1.0], vec![g.identity_coords(), z1.clone()])
                .unwrap();
        let b = linalg::rotation2(0.4);
        let out = apply_gauge(&GaugeAction::conjugation(2), std::slice::from_ref(&b), &z).unwrap();
        let bt = linalg::transpose(&b, 2, 2);
        let mut expect = linalg::mat_mul(&linalg::mat_mul(&b, &z1[..4], 2, 2, 2), &bt, 2, 2, 2);
        expect.extend(linalg::mat_vec(&b, &z1[4..], 2, 2));
        assert!(linalg::max_abs_diff(&out.values[1], &expect) < 1e-14);
    }

    #[test]
    fn opaque_action_rejected_on_grid() {
        let mut act = GaugeAction::rotation(1);
        act.kind = ActionKind::Opaque;
        let z = sample(&DriverSpec { kind: DriverKind::Brownian(1), seed: 2, grid: uniform_grid(1.0, 3) }).unwrap();
        assert!(matches!(apply_gauge(&act, &vec![vec![1.0]; 3], &z), Err(StosymError::Unsupported(_))));
    }

    #[test]
    fn smooth_action_uses_second_order_expansion() {
        // Ξ_g(z) = g·z + (g·z)² on ℝ: a nonlinear action of the trivial-looking kind.
        let act = GaugeAction::new(
            "quadratic",
            GaugeGroup::Orthogonal(1),
            GroupDescriptor::Additive(1),
            ActionKind::Smooth,
            Arc::new(|g, z| vec![g[0] * z[0] + (g[0] * z[0]).powi(2)]),
            Arc::new(|c, z| vec![c[0] * z[0]]),
        );
        let z = sample(&DriverSpec { kind: DriverKind::Brownian(1), seed: 3, grid: uniform_grid(1.0, 10) }).unwrap();
        let out = apply_gauge(&act, &vec![vec![-1.0]; 10], &z).unwrap();
        for s in 1..z.len() {
            let d = z.values[s][0] - z.values[s - 1][0];
            let got = out.values[s][0] - out.values[s - 1][0];
            assert!((got - (-d + d * d)).abs() < 1e-6);
        }
    }

    #[test]
    fn time_change_examples() {
        let p = CadlagPath::new(
            PathSpace::Euclidean(1),
            PathStyle::DiscreteJump,
            vec![0.0, 1.0, 2.0, 3.0],
            vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
        )
        .unwrap();
        assert_eq!(time_change(&p, &[1.0; 3], ETA_FLOOR).unwrap(), p);
        // β_t = 2t, so H_β(X)_s = X_{s/2}: the unit-time jumps move to 2, 4, 6.
        let q = time_change(&p, &[2.0; 3], ETA_FLOOR).unwrap();
        assert_eq!(q.times, vec![0.0, 2.0, 4.0, 6.0]);
        assert_eq!(q.value_at(3.9), &[1.0]);
        assert_eq!(q.value_at(4.0), &[2.0]);
        let ramp = CadlagPath::new(
            PathSpace::Euclidean(1),
            PathStyle::GridSampled,
            uniform_grid(1.0, 50),
            uniform_grid(1.0, 50).into_iter().map(|t| vec![t]).collect(),
        )
        .unwrap();
        let c = 2.5;
        let r = time_change(&ramp, &[c; 50], ETA_FLOOR).unwrap();
        for (t, v) in r.times.iter().zip(&r.values) {
            assert!((v[0] - t / c).abs() < 1e-9);
        }
        assert!(time_change(&p, &[1.0, 1e-9, 1.0], ETA_FLOOR).is_err());
    }

    #[test]
    fn composition_examples() {
        let probes = probes(5, 20, 2);
        let t = StochasticTransformation::linear(linalg::rotation2(0.3), 2, 2, linalg::rotation2(0.3)).unwrap();
        let id = StochasticTransformation::identity(2, 2);
        assert!(compose(&t, &id).distance(&t, &probes) < 1e-15);
        let tb = StochasticTransformation::linear(linalg::rotation2(0.5), 2, 2, linalg::rotation2(0.5)).unwrap();
        let tab = StochasticTransformation::linear(linalg::rotation2(0.8), 2, 2, linalg::rotation2(0.8)).unwrap();
        assert!(compose(&tb, &t).distance(&tab, &probes) < 1e-14);
        let e2 = StochasticTransformation::new(2, 2, Arc::new(|x| x.to_vec()), None, Arc::new(|_| linalg::identity(2)), Arc::new(|_| 2.0));
        let e3 = StochasticTransformation::new(2, 2, Arc::new(|x| x.to_vec()), None, Arc::new(|_| linalg::identity(2)), Arc::new(|_| 3.0));
        assert_eq!(compose(&e2, &e3).eta(&[0.1, 0.2]), 6.0);
    }

    #[test]
    fn inverse_examples() {
        let probes = probes(6, 20, 2);
        let id = StochasticTransformation::identity(2, 2);
        assert!(invert(&id).unwrap().distance(&id, &probes) < 1e-15);
        let t = StochasticTransformation::linear(linalg::rotation2(0.7), 2, 2, linalg::rotation2(0.7)).unwrap();
        let tm = StochasticTransformation::linear(linalg::rotation2(-0.7), 2, 2, linalg::rotation2(-0.7)).unwrap();
        assert!(invert(&t).unwrap().distance(&tm, &probes) < 1e-14);
        let eta: ScalarFn = Arc::new(|x: &[f64]| 1.0 + x[0] * x[0]);
        let idf: StateFn = Arc::new(|x: &[f64]| x.to_vec());
        let pt = StochasticTransformation::new(2, 2, idf.clone(), Some(idf), Arc::new(|_| linalg::identity(2)), eta);
        let inv = invert(&pt).unwrap();
        assert!((inv.eta(&[2.0, 0.0]) - 0.2).abs() < 1e-15);
        let no_inv =
            StochasticTransformation::new(2, 2, Arc::new(|x| x.to_vec()), None, Arc::new(|_| linalg::identity(2)), Arc::new(|_| 1.0));
        assert!(invert(&no_inv).is_err());
    }

    #[test]
    fn bracket_examples() {
        let probes = probes(7, 20, 2);
        let v = rot_field();
        let zero = InfinitesimalStochasticTransformation::zero(2, 2);
        assert!(bracket(&v, &v).distance(&zero, &probes) < 1e-9);
        let y1 =
            InfinitesimalStochasticTransformation::new(2, 2, Arc::new(|_| vec![1.0, 0.0]), Arc::new(|_| vec![0.0; 4]), Arc::new(|_| 0.0));
        let y2 =
            InfinitesimalStochasticTransformation::new(2, 2, Arc::new(|x| vec![0.0, x[0]]), Arc::new(|_| vec![0.0; 4]), Arc::new(|_| 0.0));
        let b = bracket(&y1, &y2);
        for x in &probes {
            assert!(linalg::max_abs_diff(&b.y(x), &[0.0, 1.0]) < 1e-9);
            assert!(linalg::norm(&b.c(x)) < 1e-12 && b.tau(x) == 0.0);
        }
    }

    #[test]
    fn push_forward_examples() {
        let probes = probes(8, 20, 2);
        let v = rot_field();
        let id = StochasticTransformation::identity(2, 2);
        assert!(push_forward(&id, &v).unwrap().distance(&v, &probes) < 1e-9);
        let a = vec![2.0, 1.0, 0.0, 3.0];
        let t = StochasticTransformation::linear(a.clone(), 2, 2, linalg::identity(2)).unwrap();
        let cst =
            InfinitesimalStochasticTransformation::new(2, 2, Arc::new(|_| vec![1.0, -1.0]), Arc::new(|_| vec![0.0; 4]), Arc::new(|_| 0.0));
        let pf = push_forward(&t, &cst).unwrap();
        for x in &probes {
            assert!(linalg::max_abs_diff(&pf.y(x), &[1.0, -3.0]) < 1e-12);
        }
    }

    #[test]
    fn flow_examples() {
        let cfg = FlowConfig::default();
        let v = rot_field();
        let x = [0.6, -0.2];
        let f0 = flow_point(&v, 0.0, &x, &cfg).unwrap();
        assert_eq!(f0.phi, x.to_vec());
        assert_eq!(f0.b, linalg::identity(2));
        let a = 1.1;
        let f = flow_point(&v, a, &x, &cfg).unwrap();
        assert!(linalg::max_abs_diff(&f.phi, &linalg::mat_vec(&linalg::rotation2(a), &x, 2, 2)) < 1e-12);
        assert!(linalg::max_abs_diff(&f.b, &linalg::rotation2(a)) < 1e-12);
        assert!(flow_self_check(&v, a, &x, &cfg).unwrap() < 1e-8);
        let tv = InfinitesimalStochasticTransformation::new(1, 1, Arc::new(|_| vec![0.0]), Arc::new(|_| vec![0.0]), Arc::new(|_| 1.0));
        let g = flow_point(&tv, 0.8, &[0.0], &cfg).unwrap();
        assert!((g.eta - 0.8f64.exp()).abs() < 1e-12);
        let blow =
            InfinitesimalStochasticTransformation::new(1, 1, Arc::new(|x| vec![x[0] * x[0]]), Arc::new(|_| vec![0.0]), Arc::new(|_| 0.0));
        assert!(matches!(flow_point(&blow, 2.0, &[1.0], &cfg), Err(StosymError::Domain(_))));
    }

    #[test]
    fn apply_p_identity_and_rotation() {
        let z = sample(&DriverSpec { kind: DriverKind::Brownian(2), seed: 9, grid: uniform_grid(1.0, 10) }).unwrap();
        let x = CadlagPath { space: PathSpace::Euclidean(2), jumps: vec![None; 11], ..z.clone() };
        let id = StochasticTransformation::identity(2, 2);
        let act = GaugeAction::rotation(2);
        let (xp, zp) = apply_p(&id, &x, &z, &act, None).unwrap();
        assert_eq!(xp, x);
        assert!(zp.values.iter().zip(&z.values).all(|(a, b)| linalg::max_abs_diff(a, b) < 1e-15));
        let b = linalg::rotation2(1.0);
        let idf: StateFn = Arc::new(|x: &[f64]| x.to_vec());
        let b2 = b.clone();
        let t = StochasticTransformation::new(2, 2, idf.clone(), Some(idf), Arc::new(move |_| b2.clone()), Arc::new(|_| 1.0));
        let (xp, zp) = apply_p(&t, &x, &z, &act, None).unwrap();
        assert_eq!(xp.values, x.values);
        for s in 0..z.len() {
            assert!(linalg::max_abs_diff(&zp.values[s], &linalg::mat_vec(&b, &z.values[s], 2, 2)) < 1e-12);
        }
        let eta2 = StochasticTransformation::new(
            2,
            2,
            Arc::new(|x: &[f64]| x.to_vec()),
            None,
            Arc::new(|_| linalg::identity(2)),
            Arc::new(|_| 2.0),
        );
        assert!(apply_p(&eta2, &x, &z, &act, None).is_err());
    }

    proptest! {
        #[test]
        fn compose_is_associative_and_invert_two_sided(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0) {
            let mk = |ang: f64, s: f64| {
                let rot = linalg::rotation2(ang);
                let m: Vec<f64> = rot.iter().map(|v| v * s).collect();
                let minv = linalg::inverse(&m, 2, 1e-12).unwrap();
                let (m1, r1) = (m.clone(), rot.clone());
                StochasticTransformation::new(
                    2, 2,
                    Arc::new(move |x| { let y = linalg::mat_vec(&m1, x, 2, 2); vec![y[0] + 0.1 * y[1] * y[1], y[1]] }),
                    Some(Arc::new(move |x| { let y = vec![x[0] - 0.1 * x[1] * x[1], x[1]]; linalg::mat_vec(&minv, &y, 2, 2) })),
                    Arc::new(move |x| { let e = linalg::rotation2(x[0]); linalg::mat_mul(&e, &r1, 2, 2, 2) }),
                    Arc::new(move |x| 1.0 + 0.5 * (x[1] * s).sin().powi(2)),
                )
            };
            let (t1, t2, t3) = (mk(a, 1.2), mk(b, 0.8), mk(c, 1.5));
            let pr = probes(11, 10, 2);
            let lhs = compose(&compose(&t3, &t2), &t1);
            let rhs = compose(&t3, &compose(&t2, &t1));
            prop_assert!(lhs.distance(&rhs, &pr) < 1e-9);
            let id = StochasticTransformation::identity(2, 2);
            let inv = invert(&t1).unwrap();
            prop_assert!(compose(&t1, &inv).distance(&id, &pr) < 1e-9);
            prop_assert!(compose(&inv, &t1).distance(&id, &pr) < 1e-9);
        }
    }
}
