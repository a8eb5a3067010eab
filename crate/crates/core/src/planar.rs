//! The planar affine equation `X_ℓ = Z₁·X_{ℓ−1} + Z₂` on `GL(2) × ℝ²`, its
//! rotation symmetry and its polar reduction.

use std::f64::consts::PI;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use crate::lie_groups::GroupDescriptor;
use crate::linalg;
use crate::noise::IncrementSampler;
use crate::rng::StosymRng;
use crate::sde::{GeometricalSde, JacFn, PsiFn, SecondOrder, StateFn};
use crate::transform::{GaugeAction, InfinitesimalStochasticTransformation, StochasticTransformation};

/// Generator of planar rotations.
pub const ROTATION_GENERATOR: [f64; 4] = [0.0, -1.0, 1.0, 0.0];

pub fn driver_group() -> GroupDescriptor {
    GroupDescriptor::Product(vec![GroupDescriptor::GeneralLinear(2), GroupDescriptor::Additive(2)])
}

/// `Ψ(x, z) = z₁·x + z₂` with analytic first derivatives; affine in `z`.
pub fn affine_sde() -> GeometricalSde {
    let psi: PsiFn = Arc::new(|x, z| vec![z[0] * x[0] + z[1] * x[1] + z[4], z[2] * x[0] + z[3] * x[1] + z[5]]);
    let jx: JacFn = Arc::new(|_x, z| z[0..4].to_vec());
    let jz: JacFn = Arc::new(|x, _z| vec![x[0], x[1], 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, x[0], x[1], 0.0, 1.0]);
    GeometricalSde::new(2, driver_group(), psi).with_jac_x(jx).with_jac_z(jz).with_second_order(SecondOrder::Zero)
}

/// `Ξ_B(z₁, z₂) = (B z₁ Bᵀ, B z₂)`.
pub fn gauge_action() -> GaugeAction {
    GaugeAction::conjugation(2)
}

/// `V = (−x²∂₁ + x¹∂₂, C = R, τ = 0)` scaled by `c_scale` in the gauge part.
pub fn rotation_generator_scaled(c_scale: f64) -> InfinitesimalStochasticTransformation {
    let c: Vec<f64> = ROTATION_GENERATOR.iter().map(|v| v * c_scale).collect();
    InfinitesimalStochasticTransformation::new(2, 2, Arc::new(|x| vec![-x[1], x[0]]), Arc::new(move |_| c.clone()), Arc::new(|_| 0.0))
        .with_jacobian(Arc::new(|_| ROTATION_GENERATOR.to_vec()))
}

pub fn rotation_generator() -> InfinitesimalStochasticTransformation {
    rotation_generator_scaled(1.0)
}

/// `T_a = (R_a x, R_a, 1)`.
pub fn rotation(a: f64) -> StochasticTransformation {
    StochasticTransformation::linear(linalg::rotation2(a), 2, 2, linalg::rotation2(a)).expect("rotations are invertible")
}

/// `B(x) = [[x¹, x²], [−x², x¹]] / |x|`, i.e. rotation by `−arg(x)`.
pub fn polar_gauge(x: &[f64]) -> Vec<f64> {
    let r = x[0].hypot(x[1]);
    vec![x[0] / r, x[1] / r, -x[1] / r, x[0] / r]
}

/// `T = (id, B(x), 1)` with `B` from [`polar_gauge`].
pub fn polar_transformation() -> StochasticTransformation {
    let id: StateFn = Arc::new(|x: &[f64]| x.to_vec());
    StochasticTransformation::new(2, 2, id.clone(), Some(id), Arc::new(polar_gauge), Arc::new(|_| 1.0))
        .with_jacobian(Arc::new(|_| linalg::identity(2)))
}

/// `Ψ′(x, z) = [[x¹, −x²], [x², x¹]]·(z₁¹¹, z₁²¹) + R_θ z₂` with `θ = arg(x)`.
pub fn strong_form(x: &[f64], z: &[f64]) -> Vec<f64> {
    let r = x[0].hypot(x[1]);
    let (c, s) = (x[0] / r, x[1] / r);
    vec![x[0] * z[0] - x[1] * z[2] + c * z[4] - s * z[5], x[1] * z[0] + x[0] * z[2] + s * z[4] + c * z[5]]
}

/// Angle from the positive first axis, in `(−π, π]`.
pub fn arg(a: f64, b: f64) -> f64 {
    let t = b.atan2(a);
    if t == -PI {
        PI
    } else {
        t
    }
}

/// The reduced equation on `(θ, ρ)`, `ρ = |x|²`:
/// `θ ↦ θ + arg(v)`, `ρ ↦ |v|²` with `v = √ρ·(z₁¹¹, z₁²¹) + z₂`.
/// The angle is not wrapped, so the `θ` component is a running angle.
pub fn polar_sde() -> GeometricalSde {
    let psi: PsiFn = Arc::new(|x, z| {
        let sr = x[1].max(0.0).sqrt();
        let v = [sr * z[0] + z[4], sr * z[2] + z[5]];
        vec![x[0] + arg(v[0], v[1]), v[0] * v[0] + v[1] * v[1]]
    });
    GeometricalSde::new(2, driver_group(), psi)
}

/// `(x¹, x²) ↦ (θ, ρ)`.
pub fn to_polar(x: &[f64]) -> [f64; 2] {
    [arg(x[0], x[1]), x[0] * x[0] + x[1] * x[1]]
}

/// `(θ, ρ) ↦ (x¹, x²)`.
pub fn from_polar(p: &[f64]) -> [f64; 2] {
    let r = p[1].max(0.0).sqrt();
    [r * p[0].cos(), r * p[0].sin()]
}

/// Increments `(c(I + sG), b)` with `G`, `b` standard Gaussian; the law is
/// invariant under `Ξ_B` for every orthogonal `B`. Near-singular draws are redrawn.
pub fn conjugation_invariant_sampler(c: f64, s: f64) -> IncrementSampler {
    Arc::new(move |rng: &mut StosymRng| loop {
        let mut n = || -> f64 { Distribution::<f64>::sample(&StandardNormal, rng) };
        let a = [c * (1.0 + s * n()), c * s * n(), c * s * n(), c * (1.0 + s * n())];
        let b = [n(), n()];
        if (a[0] * a[3] - a[1] * a[2]).abs() >= 1e-3 {
            return vec![a[0], a[1], a[2], a[3], b[0], b[1]];
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::transform::apply_e;
    use rand::Rng;

    #[test]
    fn polar_gauge_rotates_onto_first_axis() {
        let x = [0.3, -1.7];
        let b = polar_gauge(&x);
        let bx = linalg::mat_vec(&b, &x, 2, 2);
        assert!((bx[0] - x[0].hypot(x[1])).abs() < 1e-14 && bx[1].abs() < 1e-14);
        assert!(linalg::orthogonality_defect(&b, 2) < 1e-14);
        assert!(linalg::max_abs_diff(&b, &linalg::rotation2(-arg(x[0], x[1]))) < 1e-14);
    }

    #[test]
    fn strong_form_matches_transformed_equation() {
        let e = apply_e(&polar_transformation(), &affine_sde(), &gauge_action(), None).unwrap();
        let mut r = rng_from_seed(4);
        for _ in 0..50 {
            let x: Vec<f64> = (0..2).map(|_| r.random_range(-2.0..2.0)).collect();
            let z: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
            assert!(linalg::max_abs_diff(&e.eval(&x, &z), &strong_form(&x, &z)) < 1e-12);
        }
    }

    #[test]
    fn polar_equation_tracks_strong_form() {
        let mut r = rng_from_seed(5);
        let polar = polar_sde();
        for _ in 0..50 {
            let x: Vec<f64> = (0..2).map(|_| r.random_range(-2.0..2.0)).collect();
            let z: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
            let direct = strong_form(&x, &z);
            let p = polar.eval(&to_polar(&x), &z);
            assert!(linalg::max_abs_diff(&from_polar(&p), &direct) < 1e-12);
        }
    }

    #[test]
    fn sampler_avoids_singular_draws() {
        let f = conjugation_invariant_sampler(0.95, 0.2);
        let mut r = rng_from_seed(6);
        for _ in 0..1000 {
            let v = f(&mut r);
            assert!((v[0] * v[3] - v[1] * v[2]).abs() >= 1e-3);
        }
        assert_eq!(arg(-1.0, -0.0), PI);
    }
}
